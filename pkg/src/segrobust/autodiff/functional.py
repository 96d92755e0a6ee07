"""Volumetric network primitives with hand-written backward passes.

All tensors here are unbatched ``[C, D, H, W]`` volumes (batch size is always
one in this project).
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from segrobust.autodiff.tensor import Tensor
from segrobust.errors import ConfigError, ShapeError

Pads = tuple[tuple[int, int], tuple[int, int], tuple[int, int]]
PaddingScheme = Union[str, Pads]

#: Stride-2 padding. (0, 1) halves every even extent exactly.
DOWNSAMPLE_PADS: Pads = ((0, 1), (0, 1), (0, 1))


def resolve_padding(padding: PaddingScheme, kernel: int, stride: int) -> Pads:
    """Turn a padding scheme name into per-axis (low, high) pads.

    ``"same"`` pads stride-1 kernels symmetrically and stride-2 kernels with
    :data:`DOWNSAMPLE_PADS`; ``"asymmetric"`` is the one-low/two-high stride-2
    layout (yields ``D // 2 + 1`` outputs on even extents); ``"valid"`` pads
    nothing.
    """
    if not isinstance(padding, str):
        pads = tuple(tuple(int(v) for v in p) for p in padding)
        if len(pads) != 3 or any(len(p) != 2 or min(p) < 0 for p in pads):
            raise ConfigError(f"padding must be three (low, high) pairs, got {padding!r}")
        return pads  # type: ignore[return-value]
    if padding == "valid" or kernel == 1:
        return ((0, 0),) * 3
    half = kernel // 2
    if padding == "same":
        if stride == 1:
            return ((half, half),) * 3
        if stride == 2 and kernel == 3:
            return DOWNSAMPLE_PADS
    if padding == "asymmetric" and kernel == 3:
        return ((1, 1),) * 3 if stride == 1 else ((1, 2),) * 3
    raise ConfigError(f"padding scheme {padding!r} undefined for kernel {kernel}, stride {stride}")


def conv_output_extent(n: int, kernel: int, stride: int, pad: tuple[int, int]) -> int:
    return (n + pad[0] + pad[1] - kernel) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, out: tuple[int, int, int]) -> np.ndarray:
    c = xp.shape[0]
    do, ho, wo = out
    cols = np.empty((c, k, k, k, do, ho, wo))
    for a in range(k):
        for b in range(k):
            for e in range(k):
                cols[:, a, b, e] = xp[
                    :,
                    a : a + stride * (do - 1) + 1 : stride,
                    b : b + stride * (ho - 1) + 1 : stride,
                    e : e + stride * (wo - 1) + 1 : stride,
                ]
    return cols.reshape(c * k**3, do * ho * wo)


def _col2im(cols: np.ndarray, padded_shape: tuple[int, ...], k: int, stride: int, out: tuple[int, int, int]) -> np.ndarray:
    c = padded_shape[0]
    do, ho, wo = out
    cols = cols.reshape(c, k, k, k, do, ho, wo)
    xp = np.zeros(padded_shape)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                xp[
                    :,
                    a : a + stride * (do - 1) + 1 : stride,
                    b : b + stride * (ho - 1) + 1 : stride,
                    e : e + stride * (wo - 1) + 1 : stride,
                ] += cols[:, a, b, e]
    return xp


def conv3d(x: Tensor, kernel: Tensor, stride: int = 1, padding: PaddingScheme = "same") -> Tensor:
    """Cross-correlate ``x [C_in,D,H,W]`` with ``kernel [C_out,C_in,k,k,k]``, k in {1, 3}."""
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects [C,D,H,W] input and 5-D kernel, got {x.shape} and {kernel.shape}")
    c_out, c_in, k, k2, k3 = kernel.shape
    if not (k == k2 == k3) or k not in (1, 3):
        raise ShapeError(f"kernel spatial extent must be 1 or 3 on every axis, got {kernel.shape[2:]}")
    if x.shape[0] != c_in:
        raise ShapeError(f"input has {x.shape[0]} channels but kernel expects {c_in}")
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    pads = resolve_padding(padding, k, stride)
    xp = np.pad(x.data, ((0, 0),) + pads) if any(sum(p) for p in pads) else x.data
    out_ext = tuple(conv_output_extent(n, k, stride, p) for n, p in zip(x.shape[1:], pads))
    if min(out_ext) < 1:
        raise ShapeError(f"input extents {x.shape[1:]} too small for kernel {k} with pads {pads}")

    if k == 1 and stride == 1:
        cols = xp.reshape(c_in, -1)
    else:
        cols = _im2col(xp, k, stride, out_ext)  # type: ignore[arg-type]
    w2 = kernel.data.reshape(c_out, -1)
    out = (w2 @ cols).reshape((c_out,) + out_ext)

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = w2.T @ g2
            if k == 1 and stride == 1:
                gxp = gcols.reshape(xp.shape)
            else:
                gxp = _col2im(gcols, xp.shape, k, stride, out_ext)  # type: ignore[arg-type]
            (d0, _), (h0, _), (w0, _) = pads
            d, h, w = x.shape[1:]
            gx = gxp[:, d0 : d0 + d, h0 : h0 + h, w0 : w0 + w]
            gx = np.ascontiguousarray(gx)
        return gx, gw

    return Tensor.from_op(out, (x, kernel), backward, "conv3d")


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each channel over its spatial extent (no affine terms)."""
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    axes = tuple(range(1, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv_std * (g - gm - xhat * gxm),)

    return Tensor.from_op(xhat, (x,), backward, "instance_norm")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope)
    return Tensor.from_op(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def softmax_temperature(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax of ``logits / temperature`` over the class axis (axis 0)."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = logits.data / temperature
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=0, keepdims=True)) / temperature,)

    return Tensor.from_op(p, (logits,), backward, "softmax")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if factor != 2:
        raise ConfigError("only factor-2 upsampling is supported")
    c, d, h, w = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6)),)

    return Tensor.from_op(out, (x,), backward, "upsample")


def dropout3d(x: Tensor, rate: float, rng: np.random.Generator | int | None = None, training: bool = True) -> Tensor:
    """Zero whole channels with probability ``rate``; survivors scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    keep = gen.random(x.shape[0]) >= rate
    mask = (keep / (1.0 - rate)).reshape((-1,) + (1,) * (x.ndim - 1))
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout3d")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len({t.shape[:axis] + t.shape[axis + 1 :] for t in tensors}) != 1:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")
