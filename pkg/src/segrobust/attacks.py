"""Gradient-sign attacks on a segmentation model under the Dice loss.

``model`` is any callable mapping an input :class:`Tensor` to class
probabilities (a :class:`~segrobust.unet.SegModel` in evaluation mode, or a toy
function in tests). ``loss_fn(pred, target)`` defaults to the Dice loss.
Epsilons here are absolute voxel offsets; :meth:`AttackSpec.scaled` converts the
"fraction of the image's max magnitude" convention.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from segrobust.autodiff import Tensor
from segrobust.data import one_hot
from segrobust.errors import ConfigError, ShapeError
from segrobust.losses import dice_loss

Model = Callable[[Tensor], Tensor]
LossFn = Callable[[Tensor, np.ndarray], Tensor]
StepCallback = Callable[[int, np.ndarray], None]

#: Default ti-FGSM target: every voxel labelled necrotic / non-enhancing core.
DEFAULT_TARGET_CODE = 1


class Method(str, enum.Enum):
    FGSM = "fgsm"
    IFGSM = "ifgsm"
    TIFGSM = "tifgsm"


@dataclass(frozen=True)
class AttackSpec:
    """Declarative attack. ``epsilon`` is the per-step size for iterative methods."""

    method: Method = Method.FGSM
    epsilon: float = 0.05
    steps: int = 1
    target_code: int | None = None
    clip_to_input_range: bool = False
    printed_sign: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.method is Method.FGSM and self.steps != 1:
            raise ConfigError("FGSM takes exactly one step")
        if self.method is Method.TIFGSM and self.target_code is None:
            object.__setattr__(self, "target_code", DEFAULT_TARGET_CODE)

    @property
    def budget(self) -> float:
        return self.epsilon * self.steps

    def scaled(self, image: np.ndarray) -> float:
        """Absolute step size for ``image`` (epsilon times its max magnitude)."""
        return self.epsilon * float(np.abs(image).max())


@dataclass
class AdversarialResult:
    adversarial: np.ndarray
    per_step_loss: list[float] = field(default_factory=list)
    budget_used: float = 0.0


def input_gradient(model: Model, x: np.ndarray, target: np.ndarray, loss_fn: LossFn = dice_loss) -> tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to the input volume."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    loss = loss_fn(model(xt), target)
    loss.backward()
    grad = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    return float(loss.data), grad


def _loss_at(model: Model, x: np.ndarray, target: np.ndarray, loss_fn: LossFn) -> float:
    from segrobust.autodiff import no_grad

    with no_grad():
        return float(loss_fn(model(Tensor(x)), target).data)


def _sign_steps(
    model: Model,
    x: np.ndarray,
    target: np.ndarray,
    step: float,
    n: int,
    direction: float,
    loss_fn: LossFn,
    clip: bool,
    track_loss: bool,
    on_step: StepCallback | None = None,
) -> AdversarialResult:
    if step < 0:
        raise ConfigError(f"step size must be >= 0, got {step}")
    x0 = np.asarray(x, dtype=np.float64)
    lo, hi = x0.min(), x0.max()
    xk = x0.copy()
    losses: list[float] = []
    for k in range(1, n + 1):
        if step != 0.0:
            _, grad = input_gradient(model, xk, target, loss_fn)
            xk = xk + direction * step * np.sign(grad)
            if clip:
                xk = np.clip(xk, lo, hi)
        if track_loss:
            losses.append(_loss_at(model, xk, target, loss_fn))
        if on_step is not None:
            on_step(k, xk)
    budget = float(np.abs(xk - x0).max()) if xk.size else 0.0
    return AdversarialResult(xk, losses, budget)


def _check_target(x: np.ndarray, y: np.ndarray) -> None:
    if y.ndim != x.ndim or y.shape[1:] != x.shape[1:]:
        raise ShapeError(f"label tensor {y.shape} does not match input {x.shape}")


def fgsm(model: Model, x: np.ndarray, y: np.ndarray, epsilon: float, *, loss_fn: LossFn = dice_loss, clip: bool = False, track_loss: bool = False) -> AdversarialResult:
    """One signed step that increases the loss against one-hot labels ``y``."""
    _check_target(x, y)
    return _sign_steps(model, x, y, epsilon, 1, 1.0, loss_fn, clip, track_loss)


def ifgsm(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    alpha: float,
    steps: int,
    *,
    loss_fn: LossFn = dice_loss,
    clip: bool = False,
    track_loss: bool = True,
    on_step: StepCallback | None = None,
) -> AdversarialResult:
    """``steps`` chained FGSM steps of size ``alpha``.

    ``on_step(k, x_k)`` sees every iterate, so one run covers all prefixes.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    _check_target(x, y)
    return _sign_steps(model, x, y, alpha, steps, 1.0, loss_fn, clip, track_loss, on_step)


def tifgsm(
    model: Model,
    x: np.ndarray,
    target: np.ndarray,
    alpha: float,
    steps: int,
    *,
    loss_fn: LossFn = dice_loss,
    clip: bool = False,
    printed_sign: bool = False,
    track_loss: bool = True,
    on_step: StepCallback | None = None,
) -> AdversarialResult:
    """Targeted iterative FGSM: signed steps that decrease the loss toward ``target``.

    ``target`` is a one-hot array. ``printed_sign=True`` adds the gradient sign
    instead, ascending the loss toward ``target``.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    _check_target(x, target)
    direction = 1.0 if printed_sign else -1.0
    return _sign_steps(model, x, target, alpha, steps, direction, loss_fn, clip, track_loss, on_step)


def target_labels(shape: tuple[int, ...], code: int = DEFAULT_TARGET_CODE) -> np.ndarray:
    """One-hot target where every voxel carries external label ``code``."""
    return one_hot(np.full(shape, code, dtype=np.uint8))


def run_attack(
    model: Model,
    image: np.ndarray,
    labels: np.ndarray,
    spec: AttackSpec,
    *,
    track_loss: bool = False,
    on_step: StepCallback | None = None,
) -> AdversarialResult:
    """Dispatch ``spec`` on one image with external label codes ``labels``.

    The step size is scaled by the image's max magnitude (a no-op on
    standardized volumes).
    """
    step = spec.scaled(image)
    if spec.method is Method.FGSM:
        res = fgsm(model, image, one_hot(labels), step, clip=spec.clip_to_input_range, track_loss=track_loss)
        if on_step is not None:
            on_step(1, res.adversarial)
        return res
    if spec.method is Method.IFGSM:
        return ifgsm(
            model, image, one_hot(labels), step, spec.steps,
            clip=spec.clip_to_input_range, track_loss=track_loss, on_step=on_step,
        )
    target = target_labels(labels.shape, spec.target_code)
    return tifgsm(
        model, image, target, step, spec.steps,
        clip=spec.clip_to_input_range, printed_sign=spec.printed_sign, track_loss=track_loss, on_step=on_step,
    )
