"""Experiment configuration: a strict JSON document with every default materialized."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from segrobust.attacks import AttackSpec, Method
from segrobust.defenses import LONG_SCHEDULE_FROM, DefenseKind, DefenseSpec
from segrobust.errors import ConfigError
from segrobust.unet import UNetConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Section):
    seed: int = Field(0, ge=0)
    n_subjects: int = Field(20, ge=2)
    extent: int = Field(32, ge=16)
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)


class ModelSection(_Section):
    input_channels: int = 4
    num_classes: int = 4
    depth: int = 3
    base_width: int = 4
    dropout_rate: float = 0.3
    softmax_temperature: float = 1.0
    leaky_slope: float = 0.01
    norm_eps: float = 1e-5
    padding: str = "same"

    @model_validator(mode="after")
    def _valid_network(self):
        try:
            self.unet()
        except ConfigError as exc:
            raise ValueError(str(exc)) from exc
        return self

    def unet(self) -> UNetConfig:
        return UNetConfig(**self.model_dump())


class TrainSection(_Section):
    epochs: int = Field(100, ge=0)
    lr: float = Field(1e-4, gt=0.0)
    seed: int = Field(0, ge=0)


class DefenseSection(_Section):
    kind: Literal["none", "distillation", "adversarial", "augmentation"] = "none"
    temperature: float = Field(1.0, gt=0.0)
    epsilon: float = Field(0.05, ge=0.0)
    mix_alpha: float = Field(0.5, ge=0.0, le=1.0)
    radius: float = Field(0.01, ge=0.0)
    long_schedule_from: float = Field(LONG_SCHEDULE_FROM, gt=0.0)  # distillation temperature that triggers 4x epochs / 5x lr


class AttackGridSection(_Section):
    method: Literal["fgsm", "ifgsm", "tifgsm"] = "fgsm"
    epsilon: float = Field(0.05, ge=0.0)  # single FGSM attack budget
    epsilons: list[float] = Field(default_factory=lambda: [round(0.01 * i, 2) for i in range(11)])
    alpha: float = Field(0.005, ge=0.0)
    steps: int = Field(10, ge=1)
    target_code: int = 1
    clip_to_input_range: bool = False
    printed_sign: bool = False

    @field_validator("epsilons")
    @classmethod
    def _nonnegative(cls, v):
        if not v:
            raise ValueError("epsilon list is empty")
        if any(e < 0 for e in v):
            raise ValueError("epsilons must be >= 0")
        return v


class OutputSection(_Section):
    directory: str = "runs/default"


class ExperimentConfig(_Section):
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    defense: DefenseSection = Field(default_factory=DefenseSection)
    attack_grid: AttackGridSection = Field(default_factory=AttackGridSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def _extent_fits_network(self):
        if self.data.extent % (2 ** self.model.depth):
            raise ValueError(f"data.extent {self.data.extent} must be divisible by 2**model.depth = {2 ** self.model.depth}")
        return self

    def unet(self) -> UNetConfig:
        return self.model.unet()

    def defense_spec(self) -> DefenseSpec:
        d = self.defense
        return DefenseSpec(
            kind=DefenseKind(d.kind), temperature=d.temperature, epsilon=d.epsilon, mix_alpha=d.mix_alpha,
            radius=d.radius, long_schedule_from=d.long_schedule_from, epochs=self.train.epochs, learning_rate=self.train.lr, seed=self.train.seed,
        )

    def attack_specs(self) -> list[AttackSpec]:
        """The evaluation grid. FGSM uses each epsilon; iterative methods use
        each epsilon as a total budget split over ``steps`` iterations."""
        g = self.attack_grid
        method = Method(g.method)
        specs = []
        for eps in g.epsilons:
            if method is Method.FGSM or eps == 0.0:
                specs.append(AttackSpec(Method.FGSM, eps, 1, clip_to_input_range=g.clip_to_input_range))
            else:
                specs.append(AttackSpec(
                    method, eps / g.steps, g.steps, target_code=g.target_code,
                    clip_to_input_range=g.clip_to_input_range, printed_sign=g.printed_sign,
                ))
        return specs

    def single_attack(self) -> AttackSpec:
        """The attack run by the ``attack`` command."""
        g = self.attack_grid
        method = Method(g.method)
        if method is Method.FGSM:
            return AttackSpec(method, g.epsilon, 1, clip_to_input_range=g.clip_to_input_range)
        return AttackSpec(
            method, g.alpha, g.steps, target_code=g.target_code,
            clip_to_input_range=g.clip_to_input_range, printed_sign=g.printed_sign,
        )

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, *, out: str | None = None, seed: int | None = None) -> ExperimentConfig:
        """``--out`` replaces output.directory; ``--seed`` replaces the data and training seeds."""
        doc = self.model_dump()
        if out is not None:
            doc["output"]["directory"] = out
        if seed is not None:
            doc["data"]["seed"] = seed
            doc["train"]["seed"] = seed
        return parse_config(doc)


def parse_config(doc: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid experiment config:\n  " + "\n  ".join(lines)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(doc)
