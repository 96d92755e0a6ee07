"""Hard region Dice on label maps and input-quality metrics (PSNR, SSIM, RMSE)."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from segrobust.data import to_internal
from segrobust.errors import ShapeError

PSNR_CAP_DB = 99.0


class Region(enum.Enum):
    WHOLE_TUMOR = "whole"
    TUMOR_CORE = "core"
    ENHANCING_TUMOR = "enh"

    @property
    def codes(self) -> tuple[int, ...]:
        return _REGION_CODES[self]


_REGION_CODES = {
    Region.WHOLE_TUMOR: (1, 2, 4),
    Region.TUMOR_CORE: (1, 4),
    Region.ENHANCING_TUMOR: (4,),
}


def region_dice(pred_labels: np.ndarray, true_labels: np.ndarray, region: Region) -> float:
    """Binary Dice of a region mask; 1.0 when both masks are empty."""
    if pred_labels.shape != true_labels.shape:
        raise ShapeError(f"label maps differ in shape: {pred_labels.shape} vs {true_labels.shape}")
    to_internal(pred_labels)
    to_internal(true_labels)
    a = np.isin(pred_labels, region.codes)
    b = np.isin(true_labels, region.codes)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def all_region_dice(pred_labels: np.ndarray, true_labels: np.ndarray) -> dict[str, float]:
    return {r.value: region_dice(pred_labels, true_labels, r) for r in Region}


def _check(reference: np.ndarray, test: np.ndarray) -> None:
    if reference.shape != test.shape:
        raise ShapeError(f"image shapes differ: {reference.shape} vs {test.shape}")


def rmse(reference: np.ndarray, test: np.ndarray) -> float:
    _check(reference, test)
    return float(np.sqrt(np.mean((np.asarray(test, float) - np.asarray(reference, float)) ** 2)))


def psnr(reference: np.ndarray, test: np.ndarray, cap: float = PSNR_CAP_DB) -> float:
    """20 log10(max|reference| / RMSE); ``cap`` for identical images."""
    err = rmse(reference, test)
    if err == 0.0:
        return cap
    peak = float(np.abs(reference).max())
    if peak == 0.0:
        return -math.inf
    return 20.0 * math.log10(peak / err)


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(vol: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = vol
    for axis in range(vol.ndim):
        win = sliding_window_view(out, g.size, axis=axis)
        out = win @ g
    return out


def ssim(reference: np.ndarray, test: np.ndarray, window: int = 7, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM under a 3D Gaussian window, averaged over channels.

    Windows lie entirely inside the volume; the window shrinks to the smallest
    odd size that fits when an axis is shorter than ``window``. A 4-D input is
    treated as ``[C, D, H, W]``.
    """
    _check(reference, test)
    ref = np.asarray(reference, float)
    tst = np.asarray(test, float)
    if ref.ndim == 3:
        ref, tst = ref[None], tst[None]
    size = min(window, *ref.shape[1:])
    size -= 1 - size % 2
    g = gaussian_window(size, sigma)
    span = float(ref.max() - ref.min()) or 1.0
    c1 = (k1 * span) ** 2
    c2 = (k2 * span) ** 2
    scores = []
    for x, y in zip(ref, tst):
        mx = _filter_valid(x, g)
        my = _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


@dataclass(frozen=True)
class QualityReport:
    psnr_db: float
    ssim: float
    rmse: float


def quality(reference: np.ndarray, test: np.ndarray) -> QualityReport:
    return QualityReport(psnr(reference, test), ssim(reference, test), rmse(reference, test))
