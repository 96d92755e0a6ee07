"""Training loops: baseline, defensive distillation, adversarial training and
the uniform-noise augmentation baseline.

Batch size is one volume. Every run is a pure function of its arguments: one
``numpy`` generator seeded from ``seed`` drives shuffling, geometric
augmentation, dropout masks and noise draws in a fixed order.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from segrobust.autodiff import Adam, Tensor, no_grad
from segrobust.data import Subject, one_hot, random_flip_rotate, to_external
from segrobust.errors import ConfigError, DivergenceError
from segrobust.losses import DEFAULT_DICE, DiceConfig, dice_loss, distillation_dice_loss
from segrobust.metrics import all_region_dice
from segrobust.unet import SegModel, UNetConfig, build

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss", "val_dice_whole", "val_dice_core", "val_dice_enh", "seconds")


LONG_SCHEDULE_FROM = 500.0  # distillation temperature from which the long schedule applies


class DefenseKind(str, enum.Enum):
    NONE = "none"
    DISTILLATION = "distillation"
    ADVERSARIAL = "adversarial"
    AUGMENTATION = "augmentation"


@dataclass(frozen=True)
class DefenseSpec:
    kind: DefenseKind = DefenseKind.NONE
    temperature: float = 1.0
    epsilon: float = 0.05
    mix_alpha: float = 0.5
    radius: float = 0.01
    epochs: int = 100
    learning_rate: float = 1e-4
    seed: int = 0
    long_schedule_from: float = LONG_SCHEDULE_FROM

    def __post_init__(self):
        object.__setattr__(self, "kind", DefenseKind(self.kind))
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 <= self.mix_alpha <= 1.0:
            raise ConfigError(f"mix_alpha must lie in [0, 1], got {self.mix_alpha}")
        if self.radius < 0:
            raise ConfigError(f"radius must be >= 0, got {self.radius}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_dice_whole: float
    val_dice_core: float
    val_dice_enh: float
    seconds: float
    phase: str = "train"


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def phase(self, name: str) -> TrainLog:
        return TrainLog([r for r in self.records if r.phase == name])

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r.epoch, repr(r.loss), repr(r.val_dice_whole), repr(r.val_dice_core), repr(r.val_dice_enh), f"{r.seconds:.3f}"])


def mean_region_dice(model: SegModel, subjects: Sequence[Subject]) -> dict[str, float]:
    scores = [all_region_dice(to_external(model.predict(s.image)), s.labels) for s in subjects]
    if not scores:
        return {"whole": math.nan, "core": math.nan, "enh": math.nan}
    return {k: float(np.mean([d[k] for d in scores])) for k in scores[0]}


def distillation_schedule(temperature: float, epochs: int, lr: float, threshold: float = LONG_SCHEDULE_FROM) -> tuple[int, float]:
    """High temperatures converge slowly: 4x the epochs and 5x the learning rate from ``threshold`` on."""
    if temperature >= threshold:
        return epochs * 4, lr * 5
    return epochs, lr


# A step function gets (model, optimizer, image, targets, rng) and returns the
# loss value it optimized.
StepFn = Callable[[SegModel, Adam, np.ndarray, np.ndarray, np.random.Generator], float]


def _fit(
    model: SegModel,
    train: Sequence[Subject],
    targets: Sequence[np.ndarray],
    step: StepFn,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    *,
    val: Sequence[Subject] = (),
    augment: bool = True,
    phase: str = "train",
    epoch_offset: int = 0,
) -> TrainLog:
    opt = Adam(model.params, lr=lr)
    out = TrainLog()
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for i in rng.permutation(len(train)):
            image, target = train[i].image, targets[i]
            if augment:
                image, target = random_flip_rotate(image, target, rng)
            loss = step(model, opt, image, target, rng)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch_offset + epoch} ({phase})", epoch_offset + epoch)
            losses.append(loss)
        dice = mean_region_dice(model, val)
        rec = EpochRecord(
            epoch_offset + epoch,
            float(np.mean(losses)) if losses else math.nan,
            dice["whole"],
            dice["core"],
            dice["enh"],
            time.perf_counter() - t0,
            phase,
        )
        out.records.append(rec)
        log.debug("%s epoch %d loss %.5f val whole %.3f", phase, rec.epoch, rec.loss, rec.val_dice_whole)
    return out


def _dice_step(cfg: DiceConfig, loss_fn=dice_loss) -> StepFn:
    def step(model, opt, image, target, rng):
        drop_seed = int(rng.integers(2**63))
        opt.zero_grad()
        loss = loss_fn(model.forward(Tensor(image), training=True, rng=drop_seed), target, cfg)
        loss.backward()
        opt.step()
        return float(loss.data)

    return step


def _one_hots(subjects: Sequence[Subject], n: int) -> list[np.ndarray]:
    return [one_hot(s.labels, n) for s in subjects]


def train_baseline(
    config: UNetConfig,
    train: Sequence[Subject],
    epochs: int,
    lr: float,
    seed: int,
    *,
    val: Sequence[Subject] = (),
    augment: bool = True,
    dice: DiceConfig = DEFAULT_DICE,
) -> tuple[SegModel, TrainLog]:
    """Adam on the Dice loss against the one-hot ground truth."""
    if not train:
        raise ConfigError("training set is empty")
    model = build(config, seed)
    rng = np.random.default_rng(seed)
    log_ = _fit(model, train, _one_hots(train, config.num_classes), _dice_step(dice), epochs, lr, rng, val=val, augment=augment)
    return model, log_


def soft_labels(model: SegModel, image: np.ndarray) -> np.ndarray:
    with no_grad():
        return model.forward(Tensor(image)).data


def train_distilled(
    config: UNetConfig,
    train: Sequence[Subject],
    temperature: float,
    epochs: int,
    lr: float,
    seed: int,
    *,
    teacher: SegModel | None = None,
    val: Sequence[Subject] = (),
    augment: bool = True,
    dice: DiceConfig = DEFAULT_DICE,
    long_schedule_from: float | None = LONG_SCHEDULE_FROM,
) -> tuple[SegModel, SegModel, TrainLog]:
    """Defensive distillation at ``temperature``.

    The teacher is trained with a temperature-T head on hard labels (or passed
    in already trained), its temperature-T outputs on every training volume
    become cached soft labels, and a fresh student with the same architecture
    and head is fitted to them. The student is returned with a T = 1 head,
    the deployment setting. Both phases appear in the log (``phase`` field).
    From ``long_schedule_from`` on, both phases run the long schedule
    (:func:`distillation_schedule`); ``None`` disables it.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if not train:
        raise ConfigError("training set is empty")
    cfg_t = replace(config, softmax_temperature=temperature)
    if long_schedule_from is not None:
        epochs, lr = distillation_schedule(temperature, epochs, lr, long_schedule_from)

    full = TrainLog()
    if teacher is None:
        teacher, t_log = train_baseline(cfg_t, train, epochs, lr, seed, val=val, augment=augment, dice=dice)
        for r in t_log.records:
            r.phase = "teacher"
        full.records.extend(t_log.records)
    else:
        teacher = teacher.with_temperature(temperature)

    targets = [soft_labels(teacher, s.image) for s in train]
    student = build(cfg_t, seed + 1)
    rng = np.random.default_rng(seed + 1)
    s_log = _fit(
        student, train, targets, _dice_step(dice, distillation_dice_loss), epochs, lr, rng,
        val=val, augment=augment, phase="student", epoch_offset=len(full.records),
    )
    full.records.extend(s_log.records)
    return teacher, student.with_temperature(1.0), full


def fgsm_example(model: SegModel, image: np.ndarray, target: np.ndarray, epsilon: float, dice: DiceConfig = DEFAULT_DICE) -> np.ndarray:
    """FGSM input at the current parameters (evaluation mode)."""
    if epsilon == 0.0:
        return image
    x = Tensor(image, requires_grad=True)
    dice_loss(model(x), target, dice).backward()
    return image + epsilon * np.sign(x.grad)


def adversarial_train(
    config: UNetConfig,
    train: Sequence[Subject],
    epsilon: float,
    mix_alpha: float,
    epochs: int,
    lr: float,
    seed: int,
    *,
    val: Sequence[Subject] = (),
    augment: bool = True,
    dice: DiceConfig = DEFAULT_DICE,
) -> tuple[SegModel, TrainLog]:
    """Minimize ``a * L(x) + (1 - a) * L(x + eps * sign(grad_x L(x)))``.

    Per volume: craft the FGSM example at the current parameters, backpropagate
    the adversarial term, then the clean term, and take a single optimizer step
    on the accumulated gradient. Both forward passes share one dropout mask.
    """
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    if not 0.0 <= mix_alpha <= 1.0:
        raise ConfigError(f"mix_alpha must lie in [0, 1], got {mix_alpha}")
    if not train:
        raise ConfigError("training set is empty")

    def step(model, opt, image, target, rng):
        drop_seed = int(rng.integers(2**63))
        opt.zero_grad()
        total = 0.0
        if mix_alpha < 1.0:
            x_adv = fgsm_example(model, image, target, epsilon, dice)
            adv = dice_loss(model.forward(Tensor(x_adv), training=True, rng=drop_seed), target, dice) * (1.0 - mix_alpha)
            adv.backward()
            total += float(adv.data)
        if mix_alpha > 0.0:
            clean = dice_loss(model.forward(Tensor(image), training=True, rng=drop_seed), target, dice) * mix_alpha
            clean.backward()
            total += float(clean.data)
        opt.step()
        return total

    model = build(config, seed)
    rng = np.random.default_rng(seed)
    return model, _fit(model, train, _one_hots(train, config.num_classes), step, epochs, lr, rng, val=val, augment=augment)


def augmentation_train(
    config: UNetConfig,
    train: Sequence[Subject],
    radius: float,
    epochs: int,
    lr: float,
    seed: int,
    *,
    val: Sequence[Subject] = (),
    augment: bool = True,
    dice: DiceConfig = DEFAULT_DICE,
) -> tuple[SegModel, TrainLog]:
    """Per volume: one step on ``x + U[-radius, radius]`` noise, then one on clean ``x``.

    The logged loss is the mean of the two step losses.
    """
    if radius < 0:
        raise ConfigError(f"radius must be >= 0, got {radius}")
    if not train:
        raise ConfigError("training set is empty")
    inner = _dice_step(dice)

    def step(model, opt, image, target, rng):
        noisy = image + rng.uniform(-radius, radius, size=image.shape)
        a = inner(model, opt, noisy, target, rng)
        b = inner(model, opt, image, target, rng)
        return 0.5 * (a + b)

    model = build(config, seed)
    rng = np.random.default_rng(seed)
    return model, _fit(model, train, _one_hots(train, config.num_classes), step, epochs, lr, rng, val=val, augment=augment)


def train_defense(
    config: UNetConfig,
    train: Sequence[Subject],
    spec: DefenseSpec,
    *,
    val: Sequence[Subject] = (),
    augment: bool = True,
) -> tuple[dict[str, SegModel], TrainLog]:
    """Dispatch on ``spec.kind``; returns named models (``model`` or ``teacher``/``student``)."""
    if spec.kind is DefenseKind.NONE:
        m, lg = train_baseline(config, train, spec.epochs, spec.learning_rate, spec.seed, val=val, augment=augment)
        return {"model": m}, lg
    if spec.kind is DefenseKind.DISTILLATION:
        t, s, lg = train_distilled(
            config, train, spec.temperature, spec.epochs, spec.learning_rate, spec.seed,
            val=val, augment=augment, long_schedule_from=spec.long_schedule_from,
        )
        return {"teacher": t, "student": s}, lg
    if spec.kind is DefenseKind.ADVERSARIAL:
        m, lg = adversarial_train(config, train, spec.epsilon, spec.mix_alpha, spec.epochs, spec.learning_rate, spec.seed, val=val, augment=augment)
        return {"model": m}, lg
    m, lg = augmentation_train(config, train, spec.radius, spec.epochs, spec.learning_rate, spec.seed, val=val, augment=augment)
    return {"model": m}, lg
