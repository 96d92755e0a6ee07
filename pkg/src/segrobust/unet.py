"""Residual 3D U-Net built from the autodiff primitives.

Layout for ``depth = L`` and ``base_width = w`` (level ``l`` has ``w * 2**l``
channels and spatial extent ``S / 2**l``)::

    level 0      conv block (stride 1)        -> residual pair -> skip 0
    level l>0    conv block (stride 2)        -> residual pair -> skip l
                 (dropout sits inside the residual pair of level L)
    decoder l    upsample -> conv block -> concat(skip l, .) -> 3x3x3 block -> 1x1x1 block
    head         1x1x1 conv + bias -> temperature softmax

A conv block is conv3d -> instance norm (affine) -> leaky ReLU. A residual pair
is two stride-1 conv blocks added to a 1x1x1 projection of their input.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from segrobust.autodiff import (
    Tensor,
    concat,
    conv3d,
    dropout3d,
    instance_norm,
    leaky_relu,
    softmax_temperature,
    upsample_nearest,
)
from segrobust.errors import ConfigError, FormatError, ShapeError

CHECKPOINT_MAGIC = b"SRCK"
CHECKPOINT_VERSION = 1
HEAD_BACKGROUND_PRIOR = 3.0


@dataclass(frozen=True)
class UNetConfig:
    input_channels: int = 4
    num_classes: int = 4
    depth: int = 3
    base_width: int = 4
    dropout_rate: float = 0.3
    softmax_temperature: float = 1.0
    leaky_slope: float = 0.01
    norm_eps: float = 1e-5
    padding: str = "same"

    def __post_init__(self):
        if self.input_channels < 1 or self.num_classes < 2:
            raise ConfigError("input_channels must be >= 1 and num_classes >= 2")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not self.softmax_temperature > 0:
            raise ConfigError(f"softmax_temperature must be positive, got {self.softmax_temperature}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        if self.padding not in ("same",):
            raise ConfigError(f"unsupported padding scheme {self.padding!r}")

    def width(self, level: int) -> int:
        return self.base_width * 2**level

    def check_extents(self, extents) -> None:
        div = 2**self.depth
        for axis, n in zip("DHW", extents):
            if n % div:
                raise ShapeError(f"spatial extent {axis}={n} is not divisible by 2**depth={div}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> UNetConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown UNetConfig keys: {sorted(unknown)}")
        return cls(**d)


def _param_shapes(cfg: UNetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}

    def block(name: str, c_in: int, c_out: int, k: int = 3):
        shapes[f"{name}.w"] = (c_out, c_in, k, k, k)
        shapes[f"{name}.scale"] = (c_out,)
        shapes[f"{name}.shift"] = (c_out,)

    for lvl in range(cfg.depth + 1):
        c_in = cfg.input_channels if lvl == 0 else cfg.width(lvl - 1)
        c = cfg.width(lvl)
        block(f"enc{lvl}.entry", c_in, c)
        block(f"enc{lvl}.res1", c, c)
        block(f"enc{lvl}.res2", c, c)
        shapes[f"enc{lvl}.proj.w"] = (c, c, 1, 1, 1)
    for lvl in reversed(range(cfg.depth)):
        c = cfg.width(lvl)
        block(f"dec{lvl}.up", cfg.width(lvl + 1), c)
        block(f"dec{lvl}.merge", 2 * c, c)
        block(f"dec{lvl}.mix", c, c, k=1)
    shapes["head.w"] = (cfg.num_classes, cfg.width(0), 1, 1, 1)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def _init_params(cfg: UNetConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".scale"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    # Start from "everything is background": the Dice loss has no background
    # term, so without this prior foreground classes can flood the volume.
    params["head.b"].data[0] = HEAD_BACKGROUND_PRIOR * cfg.softmax_temperature
    return params


class SegModel:
    """A U-Net instance: config plus a named parameter set.

    ``model(x)`` returns per-voxel class probabilities ``[N, D, H, W]`` in
    evaluation mode; use :meth:`forward` for training-mode passes.
    """

    def __init__(self, config: UNetConfig, params: dict[str, Tensor], seed: int = 0):
        expected = _param_shapes(config)
        if set(expected) != set(params):
            raise ShapeError("parameter names do not match the config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params
        self.seed = seed

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def with_temperature(self, temperature: float) -> SegModel:
        """Same parameters (shared, not copied) behind a different softmax head."""
        return SegModel(replace(self.config, softmax_temperature=temperature), self.params, self.seed)

    def copy(self) -> SegModel:
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return SegModel(self.config, params, self.seed)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ------------------------------------------------------------

    def _block(self, p: dict[str, Tensor], name: str, x: Tensor, stride: int = 1) -> Tensor:
        h = conv3d(x, p[f"{name}.w"], stride=stride, padding=self.config.padding)
        h = instance_norm(h, self.config.norm_eps)
        h = h * p[f"{name}.scale"].reshape(-1, 1, 1, 1) + p[f"{name}.shift"].reshape(-1, 1, 1, 1)
        return leaky_relu(h, self.config.leaky_slope)

    def logits(
        self,
        x: Tensor,
        training: bool = False,
        rng: np.random.Generator | int | None = None,
        param_grads: bool = True,
    ) -> Tensor:
        """Pre-softmax scores. ``param_grads=False`` records no parameter gradients."""
        cfg = self.config
        p = self.params if param_grads else {k: Tensor(v.data) for k, v in self.params.items()}
        if x.ndim != 4 or x.shape[0] != cfg.input_channels:
            raise ShapeError(f"expected input [{cfg.input_channels},D,H,W], got {x.shape}")
        cfg.check_extents(x.shape[1:])
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

        skips = []
        h = x
        for lvl in range(cfg.depth + 1):
            a = self._block(p, f"enc{lvl}.entry", h, stride=1 if lvl == 0 else 2)
            r = self._block(p, f"enc{lvl}.res1", a)
            if lvl == cfg.depth:
                r = dropout3d(r, cfg.dropout_rate, gen, training)
            r = self._block(p, f"enc{lvl}.res2", r)
            h = r + conv3d(a, p[f"enc{lvl}.proj.w"])
            skips.append(h)

        for lvl in reversed(range(cfg.depth)):
            up = self._block(p, f"dec{lvl}.up", upsample_nearest(h))
            h = concat([skips[lvl], up], axis=0)
            h = self._block(p, f"dec{lvl}.merge", h)
            h = self._block(p, f"dec{lvl}.mix", h)

        out = conv3d(h, p["head.w"])
        return out + p["head.b"].reshape(-1, 1, 1, 1)

    def forward(
        self,
        x: Tensor,
        training: bool = False,
        rng: np.random.Generator | int | None = None,
        param_grads: bool = True,
    ) -> Tensor:
        z = self.logits(x, training=training, rng=rng, param_grads=param_grads)
        return softmax_temperature(z, self.config.softmax_temperature)

    def __call__(self, x: Tensor) -> Tensor:
        """Evaluation-mode probabilities; gradients flow to ``x`` only."""
        return self.forward(x, training=False, param_grads=False)

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Internal class index per voxel (argmax of the probabilities)."""
        from segrobust.autodiff import no_grad

        with no_grad():
            z = self.logits(Tensor(image))
        return np.argmax(z.data, axis=0).astype(np.uint8)


def build(config: UNetConfig | None = None, seed: int = 0) -> SegModel:
    config = config or UNetConfig()
    return SegModel(config, _init_params(config, seed), seed)


# -- checkpoint file ----------------------------------------------------------
#
# magic "SRCK" | u32 version | u32 config length | config JSON (utf-8)
# | u32 record count | records: u32 name length, name, u32 rank, u32 extents[rank],
# float64 LE payload. All integers little-endian.


def checkpoint_bytes(model: SegModel) -> bytes:
    buf = io.BytesIO()
    header = json.dumps(
        {"config": asdict(model.config), "seed": model.seed}, sort_keys=True, separators=(",", ":")
    ).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        arr = model.params[name].data
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: SegModel, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(path: str | Path) -> SegModel:
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(r.u32()).decode())
        config = UNetConfig.from_dict(header["config"])
        seed = int(header["seed"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt config block ({exc})") from exc
    expected = _param_shapes(config)
    count = r.u32()
    if count != len(expected):
        raise FormatError(f"{path}: {count} parameter records, config needs {len(expected)}")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = tuple(np.atleast_1d(r.u32(rank))) if rank else ()
        shape = tuple(int(s) for s in shape)
        if expected.get(name) != shape:
            raise FormatError(f"{path}: record {name!r} has shape {shape}, expected {expected.get(name)}")
        n = int(np.prod(shape))
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(arr, requires_grad=True)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return SegModel(config, params, seed)
