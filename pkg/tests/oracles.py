"""Independent reference implementations used only by the tests.

Each one is written the slow, obvious way so that it shares no code path
with the library function it checks.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def numerical_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (x is restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def conv3d_loops(x: np.ndarray, w: np.ndarray, stride: int, pads) -> np.ndarray:
    """Cross-correlation by explicit loops over every output and kernel tap."""
    c_in, d, h, wd = x.shape
    c_out, _, k, _, _ = w.shape
    (dl, dh), (hl, hh), (wl, wh) = pads
    od = (d + dl + dh - k) // stride + 1
    oh = (h + hl + hh - k) // stride + 1
    ow = (wd + wl + wh - k) // stride + 1
    out = np.zeros((c_out, od, oh, ow))
    for o in range(c_out):
        for i, j, l in itertools.product(range(od), range(oh), range(ow)):
            acc = 0.0
            for c in range(c_in):
                for a, b, e in itertools.product(range(k), repeat=3):
                    zi = i * stride + a - dl
                    zj = j * stride + b - hl
                    zl = l * stride + e - wl
                    if 0 <= zi < d and 0 <= zj < h and 0 <= zl < wd:
                        acc += w[o, c, a, b, e] * x[c, zi, zj, zl]
            out[o, i, j, l] = acc
    return out


def ssim_direct(x: np.ndarray, y: np.ndarray, size=7, sigma=1.5, k1=0.01, k2=0.03, span=None) -> float:
    """Single-channel 3D SSIM summing every window explicitly."""
    r = np.arange(size) - (size - 1) / 2
    g1 = np.exp(-(r**2) / (2 * sigma**2))
    g1 /= g1.sum()
    w = g1[:, None, None] * g1[None, :, None] * g1[None, None, :]
    span = x.max() - x.min() if span is None else span
    c1, c2 = (k1 * span) ** 2, (k2 * span) ** 2
    vals = []
    d, h, wd = x.shape
    for i in range(d - size + 1):
        for j in range(h - size + 1):
            for l in range(wd - size + 1):
                px = x[i : i + size, j : j + size, l : l + size]
                py = y[i : i + size, j : j + size, l : l + size]
                mx, my = (w * px).sum(), (w * py).sum()
                vx = (w * (px - mx) ** 2).sum()
                vy = (w * (py - my) ** 2).sum()
                cxy = (w * (px - mx) * (py - my)).sum()
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def _ranks(a):
    order = sorted(range(len(a)), key=lambda i: a[i])
    ranks = [0.0] * len(a)
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
            j += 1
        for t in range(i, j + 1):
            ranks[order[t]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def wilcoxon_enumerate(x, y) -> tuple[float, float]:
    """(W, two-sided p) by enumerating all 2**n sign assignments."""
    d = [a - b for a, b in zip(x, y) if a != b]
    n = len(d)
    ranks = _ranks([abs(v) for v in d])
    w_plus = sum(r for r, v in zip(ranks, d) if v > 0)
    w_minus = sum(r for r, v in zip(ranks, d) if v < 0)
    w = min(w_plus, w_minus)
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        if sum(r for r, s in zip(ranks, signs) if s) <= w + 1e-9:
            hits += 1
    return w, min(1.0, 2 * hits / 2**n)


def wilcoxon_normal(x, y) -> float:
    """Textbook normal approximation with continuity and tie corrections."""
    d = [a - b for a, b in zip(x, y) if a != b]
    n = len(d)
    ranks = _ranks([abs(v) for v in d])
    w = min(sum(r for r, v in zip(ranks, d) if v > 0), sum(r for r, v in zip(ranks, d) if v < 0))
    ties = {}
    for r in ranks:
        ties[r] = ties.get(r, 0) + 1
    var = n * (n + 1) * (2 * n + 1) / 24 - sum(t**3 - t for t in ties.values()) / 48
    z = max(abs(w - n * (n + 1) / 4) - 0.5, 0) / math.sqrt(var)
    return min(1.0, 2 * (1 - 0.5 * (1 + math.erf(z / math.sqrt(2)))))
