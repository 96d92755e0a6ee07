"""Paired Wilcoxon signed-rank test and Bonferroni adjustment."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from segrobust.errors import ConfigError, UndefinedTestError

EXACT_MAX_N = 25


@dataclass(frozen=True)
class PairedTestResult:
    statistic: float
    n_effective: int
    p_two_sided: float
    method: Literal["exact", "normal_approx"]


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties receiving the mean of the ranks they span."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_lower_tail(ranks: np.ndarray, w: float) -> float:
    """P(W+ <= w) over all 2**n equally likely sign patterns.

    Counts by dynamic programming over doubled (hence integer) ranks.
    """
    doubled = np.rint(ranks * 2).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    limit = int(math.floor(2 * w + 1e-9))
    return float(counts[: limit + 1].sum()) / float(2 ** len(ranks))


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float]) -> PairedTestResult:
    """Two-sided Wilcoxon signed-rank test on the pairs ``x - y``.

    Zero differences are dropped; tied magnitudes get average ranks. The
    statistic is ``min(W+, W-)``. For at most 25 nonzero differences the p-value
    is exact; beyond that a normal approximation with continuity and tie
    corrections is used.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size == 0:
        raise ConfigError(f"need two equal-length nonempty samples, got {x.shape} and {y.shape}")
    d = x - y
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise UndefinedTestError("all paired differences are zero; the signed-rank test is undefined")
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        p = min(1.0, 2.0 * _exact_lower_tail(ranks, w))
        return PairedTestResult(w, n, p, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return PairedTestResult(w, n, p, "normal_approx")


def bonferroni(p_values: Sequence[float], m: int | None = None) -> list[float]:
    """``min(1, p * m)`` for each p; ``m`` defaults to the number of p-values."""
    m = len(p_values) if m is None else m
    if len(p_values) < 1 or m < len(p_values):
        raise ConfigError(f"need 1 <= len(p_values) <= m, got {len(p_values)} and m={m}")
    return [min(1.0, float(p) * m) for p in p_values]
