"""Robustness evaluation over attack grids, with paired tests against the clean condition."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from segrobust.attacks import AttackSpec, Method, run_attack
from segrobust.data import Subject, to_external
from segrobust.errors import ConfigError, SegRobustError, UndefinedTestError
from segrobust.metrics import all_region_dice, quality
from segrobust.stats import bonferroni, wilcoxon_signed_rank
from segrobust.unet import SegModel

RECORD_COLUMNS = (
    "subject_id", "condition", "epsilon", "iterations",
    "dice_whole", "dice_core", "dice_enh", "psnr_db", "ssim", "rmse",
)
AGGREGATE_COLUMNS = ("condition", "epsilon", "iterations", "metric", "mean", "sd", "p_raw", "p_adj")
DICE_METRICS = ("dice_whole", "dice_core", "dice_enh")
QUALITY_METRICS = ("psnr_db", "ssim", "rmse")
SIGNIFICANCE = 0.05


@dataclass(frozen=True)
class Record:
    subject_id: str
    condition: str
    epsilon: float
    iterations: int
    dice_whole: float
    dice_core: float
    dice_enh: float
    psnr_db: float
    ssim: float
    rmse: float

    def value(self, metric: str) -> float:
        return getattr(self, metric)


@dataclass(frozen=True)
class Aggregate:
    mean: float
    sd: float
    p_raw: float | None = None
    p_adj: float | None = None

    @property
    def significant(self) -> bool:
        return self.p_adj is not None and self.p_adj < SIGNIFICANCE


@dataclass
class RobustnessReport:
    """Per-subject records plus per-(condition, metric) aggregates.

    Dice aggregates of every non-reference condition carry a two-sided
    Wilcoxon p-value against the reference condition, Bonferroni-adjusted by
    the number of non-reference conditions.
    """

    records: list[Record]
    reference: str
    conditions: list[str] = field(default_factory=list)
    aggregates: dict[tuple[str, str], Aggregate] = field(default_factory=dict)

    def __post_init__(self):
        if not self.conditions:
            self.conditions = list(dict.fromkeys(r.condition for r in self.records))
        if self.reference not in self.conditions:
            raise ConfigError(f"reference condition {self.reference!r} missing from the report")
        seen = set()
        for r in self.records:
            key = (r.subject_id, r.condition)
            if key in seen:
                raise ConfigError(f"duplicate record for {key}")
            seen.add(key)
        if not self.aggregates:
            self.aggregates = compute_aggregates(self.records, self.conditions, self.reference)

    def values(self, condition: str, metric: str) -> np.ndarray:
        rows = sorted((r for r in self.records if r.condition == condition), key=lambda r: r.subject_id)
        return np.array([r.value(metric) for r in rows])

    def mean(self, condition: str, metric: str) -> float:
        return self.aggregates[(condition, metric)].mean

    def condition_info(self, condition: str) -> tuple[float, int]:
        r = next(r for r in self.records if r.condition == condition)
        return r.epsilon, r.iterations

    def write_records(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RECORD_COLUMNS)
            for r in self.records:
                w.writerow([_fmt(getattr(r, c)) for c in RECORD_COLUMNS])

    def write_aggregates(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(AGGREGATE_COLUMNS)
            for cond in self.conditions:
                eps, iters = self.condition_info(cond)
                for metric in DICE_METRICS + QUALITY_METRICS:
                    a = self.aggregates[(cond, metric)]
                    w.writerow([cond, _fmt(eps), iters, metric, _fmt(a.mean), _fmt(a.sd), _fmt(a.p_raw), _fmt(a.p_adj)])

    @classmethod
    def read_records(cls, path: str | Path, reference: str | None = None) -> RobustnessReport:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and tuple(rows[0].keys()) != RECORD_COLUMNS:
            raise ConfigError(f"{path}: unexpected columns {list(rows[0].keys())}")
        records = [
            Record(
                row["subject_id"], row["condition"], float(row["epsilon"]), int(row["iterations"]),
                *(float(row[c]) for c in RECORD_COLUMNS[4:]),
            )
            for row in rows
        ]
        if reference is None:
            reference = next(r.condition for r in records if r.epsilon == 0.0)
        return cls(records, reference)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def compute_aggregates(records: Sequence[Record], conditions: Sequence[str], reference: str) -> dict[tuple[str, str], Aggregate]:
    by_cond: dict[str, list[Record]] = {c: [] for c in conditions}
    for r in records:
        by_cond[r.condition].append(r)
    for rows in by_cond.values():
        rows.sort(key=lambda r: r.subject_id)
    ref_rows = by_cond[reference]
    others = [c for c in conditions if c != reference]

    out: dict[tuple[str, str], Aggregate] = {}
    raw: dict[str, dict[str, float]] = {m: {} for m in DICE_METRICS}
    for cond in others:
        rows = by_cond[cond]
        if [r.subject_id for r in rows] != [r.subject_id for r in ref_rows]:
            raise ConfigError(f"condition {cond!r} does not cover the same subjects as {reference!r}")
        for m in DICE_METRICS:
            try:
                raw[m][cond] = wilcoxon_signed_rank([r.value(m) for r in rows], [r.value(m) for r in ref_rows]).p_two_sided
            except UndefinedTestError:
                raw[m][cond] = 1.0
    for m in DICE_METRICS:
        if others:
            adj = dict(zip(others, bonferroni([raw[m][c] for c in others], len(others))))
        else:
            adj = {}
        raw[m] = {c: (raw[m][c], adj[c]) for c in others}  # type: ignore[assignment]

    for cond in conditions:
        rows = by_cond[cond]
        for m in DICE_METRICS + QUALITY_METRICS:
            vals = np.array([r.value(m) for r in rows])
            sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            p_raw = p_adj = None
            if m in raw and cond in raw[m]:
                p_raw, p_adj = raw[m][cond]  # type: ignore[misc]
            out[(cond, m)] = Aggregate(float(vals.mean()), sd, p_raw, p_adj)
    return out


def condition_name(spec: AttackSpec) -> str:
    if spec.epsilon == 0.0:
        return "clean"
    if spec.method is Method.FGSM:
        return f"fgsm_eps{spec.epsilon:g}"
    return f"{spec.method.value}_eps{round(spec.budget, 9):g}_n{spec.steps}"


def _record(subject: Subject, model: SegModel, image: np.ndarray, condition: str, epsilon: float, iterations: int) -> Record:
    dice = all_region_dice(to_external(model.predict(image)), subject.labels)
    q = quality(subject.image, image)
    return Record(subject.subject_id, condition, epsilon, iterations, dice["whole"], dice["core"], dice["enh"], q.psnr_db, q.ssim, q.rmse)


def evaluate_robustness(model: SegModel, test_set: Sequence[Subject], attack_grid: Iterable[AttackSpec]) -> RobustnessReport:
    """Attack every test subject under every grid condition and score it.

    The grid must contain an epsilon-0 condition, which is the reference for
    the paired tests.
    """
    grid = list(attack_grid)
    if not test_set:
        raise ConfigError("test set is empty")
    if not any(s.epsilon == 0.0 for s in grid):
        raise ConfigError("attack grid must include the epsilon = 0 reference")
    names = list(dict.fromkeys(condition_name(s) for s in grid))
    records = []
    for subject in test_set:
        for spec, name in zip(grid, [condition_name(s) for s in grid]):
            try:
                if spec.epsilon == 0.0:
                    adv = subject.image
                else:
                    adv = run_attack(model, subject.image, subject.labels, spec).adversarial
                records.append(_record(subject, model, adv, name, spec.budget if spec.epsilon else 0.0, spec.steps if spec.epsilon else 0))
            except SegRobustError as exc:
                raise type(exc)(f"subject {subject.subject_id}, condition {name}: {exc}") from exc
    # A grid may repeat the reference (e.g. eps 0 listed for several methods).
    unique = list({(r.subject_id, r.condition): r for r in records}.values())
    return RobustnessReport(unique, "clean", names)


def iteration_sweep(model: SegModel, test_set: Sequence[Subject], method: Method | str, alpha: float, n_max: int) -> RobustnessReport:
    """Conditions for iteration counts 1..n_max of one iterative attack, plus clean.

    Each subject is attacked once with ``n_max`` steps; the k-th iterate is the
    k-step attack, so every prefix is scored from the same run.
    """
    method = Method(method)
    if method is Method.FGSM:
        raise ConfigError("iteration sweep needs an iterative method (ifgsm or tifgsm)")
    if n_max < 1:
        raise ConfigError(f"n_max must be >= 1, got {n_max}")
    if not test_set:
        raise ConfigError("test set is empty")
    spec = AttackSpec(method, alpha, n_max)
    names = ["clean"] + [condition_name(AttackSpec(method, alpha, k)) for k in range(1, n_max + 1)]
    records: list[Record] = []
    for subject in test_set:
        records.append(_record(subject, model, subject.image, "clean", 0.0, 0))
        step = spec.scaled(subject.image)

        def on_step(k, xk, subject=subject):
            records.append(_record(subject, model, xk, names[k], step * k, k))

        try:
            run_attack(model, subject.image, subject.labels, spec, on_step=on_step)
        except SegRobustError as exc:
            raise type(exc)(f"subject {subject.subject_id}, {method.value} sweep: {exc}") from exc
    return RobustnessReport(records, "clean", names)


def curve(report: RobustnessReport, metric: str) -> tuple[list[float], list[float]]:
    """(x, mean) per condition in report order; x is the budget, or the iteration count for sweeps."""
    xs, ys = [], []
    sweep = any(c.startswith(("ifgsm", "tifgsm")) for c in report.conditions)
    for cond in report.conditions:
        eps, iters = report.condition_info(cond)
        xs.append(float(iters) if sweep else eps)
        ys.append(report.mean(cond, metric))
    return xs, ys


def finite(values) -> bool:
    return all(math.isfinite(v) for v in values)
