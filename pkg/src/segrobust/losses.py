"""Smoothed soft Dice coefficient and the losses built on it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from segrobust.autodiff import Tensor, as_tensor
from segrobust.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class DiceConfig:
    """``gamma`` smooths numerator and denominator of every class ratio.

    ``prefactor_mode="normalized"`` averages over the foreground classes so a
    perfect prediction scores exactly 1; ``"paper_literal"`` divides the
    foreground sum by the total class count N instead (perfect = (N-1)/N when
    the foreground is every class but 0).
    """

    gamma: float = 1.0
    foreground_classes: tuple[int, ...] | None = None
    prefactor_mode: Literal["normalized", "paper_literal"] = "normalized"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.foreground_classes is not None and len(self.foreground_classes) == 0:
            raise ConfigError("foreground_classes must be nonempty")
        if self.prefactor_mode not in ("normalized", "paper_literal"):
            raise ConfigError(f"unknown prefactor_mode {self.prefactor_mode!r}")

    def classes(self, num_classes: int) -> tuple[int, ...]:
        fg = self.foreground_classes if self.foreground_classes is not None else tuple(range(1, num_classes))
        if any(c < 0 or c >= num_classes for c in fg):
            raise ConfigError(f"foreground classes {fg} outside [0, {num_classes})")
        return tuple(fg)


DEFAULT_DICE = DiceConfig()


def dice_coefficient(pred, target, cfg: DiceConfig = DEFAULT_DICE) -> Tensor:
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    n = pred.shape[0]
    fg = cfg.classes(n)
    axes = tuple(range(1, pred.ndim))
    inter = (pred * target).sum(axis=axes)
    denom = pred.sum(axis=axes) + target.sum(axis=axes) + cfg.gamma
    ratios = (inter * 2.0 + cfg.gamma) / denom
    idx = np.array(fg)
    total = ratios[idx].sum()
    scale = len(fg) if cfg.prefactor_mode == "normalized" else n
    return total * (1.0 / scale)


def dice_loss(pred, target, cfg: DiceConfig = DEFAULT_DICE) -> Tensor:
    return 1.0 - dice_coefficient(pred, target, cfg)


def distillation_dice_loss(student_pred, teacher_soft, cfg: DiceConfig = DEFAULT_DICE, atol: float = 1e-6) -> Tensor:
    """Dice loss against a teacher's soft labels; no gradient flows to the teacher."""
    soft = teacher_soft.data if isinstance(teacher_soft, Tensor) else np.asarray(teacher_soft, dtype=np.float64)
    rows = soft.sum(axis=0)
    if not np.allclose(rows, 1.0, rtol=0.0, atol=atol):
        worst = float(np.abs(rows - 1.0).max())
        raise ConfigError(f"teacher soft labels must sum to 1 per voxel (max deviation {worst:.3g})")
    return dice_loss(student_pred, Tensor(soft), cfg)
