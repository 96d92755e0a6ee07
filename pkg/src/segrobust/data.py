"""Synthetic tumour phantoms, preprocessing, label coding and volume files.

Label codes follow the BraTS convention: 0 background, 1 necrotic / non-enhancing
core, 2 edema, 4 enhancing tumour. Internally the classes are the contiguous
indices 0..3 (code 4 <-> index 3).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from segrobust.errors import ConfigError, FormatError, ShapeError

EXTERNAL_CODES = np.array([0, 1, 2, 4], dtype=np.uint8)
CHANNELS = ("T1", "T1Gd", "T2", "FLAIR")

VOLUME_MAGIC = b"SRTV"
LABEL_MAGIC = b"SRTL"
FILE_VERSION = 1
DTYPE_FLOAT64 = 1
DTYPE_UINT8 = 2

# Mean intensity per tissue class and channel (T1, T1Gd, T2, FLAIR), before
# noise and standardization. Contrast unit is 1.0 (healthy tissue).
_AIR = (0.0, 0.0, 0.0, 0.0)
_TISSUE = (1.0, 1.0, 1.0, 1.0)
_PROFILES = {
    1: (0.75, 0.85, 1.30, 1.15),  # necrotic core: dark T1, bright T2
    2: (0.92, 1.00, 1.20, 1.30),  # edema: bright T2 / FLAIR
    4: (0.95, 1.35, 1.12, 1.18),  # enhancing rim: bright T1Gd
}
NOISE_SIGMA = 0.05
LESION_CONTRAST = 0.7  # scales every lesion profile's deviation from healthy tissue


@dataclass
class Subject:
    """One case: a ``[4, D, H, W]`` image and its ``[D, H, W]`` external label codes."""

    subject_id: str
    image: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[1:] != self.labels.shape:
            raise ShapeError(f"{self.subject_id}: image {self.image.shape} and labels {self.labels.shape} disagree")


@dataclass
class Dataset:
    train: list[Subject] = field(default_factory=list)
    test: list[Subject] = field(default_factory=list)

    @property
    def subjects(self) -> list[Subject]:
        return self.train + self.test


# -- label coding -------------------------------------------------------------


def to_internal(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes)
    bad = ~np.isin(codes, EXTERNAL_CODES)
    if bad.any():
        raise ConfigError(f"unknown label values {sorted(set(np.unique(codes[bad]).tolist()))}")
    out = codes.astype(np.uint8).copy()
    out[codes == 4] = 3
    return out


def to_external(indices: np.ndarray) -> np.ndarray:
    indices = np.asarray(indices)
    if indices.min(initial=0) < 0 or indices.max(initial=0) > 3:
        raise ConfigError("internal class indices must lie in 0..3")
    return EXTERNAL_CODES[indices]


def one_hot(codes: np.ndarray, num_classes: int = 4) -> np.ndarray:
    """External label codes -> ``[N, D, H, W]`` one-hot float array."""
    idx = to_internal(codes)
    return (np.arange(num_classes).reshape((-1,) + (1,) * idx.ndim) == idx[None]).astype(np.float64)


# -- phantoms -----------------------------------------------------------------


def generate_phantom(seed: int, extent: int = 32, subject_id: str | None = None) -> Subject:
    """Nested-ellipsoid lesion inside an ellipsoidal head, four MR-like channels.

    The lesion is a necrotic core (1) inside an enhancing rim (4) inside an
    edema shell (2); all three share centre and axes so containment holds by
    construction. Raw intensities are returned (not standardized).
    """
    if extent < 16:
        raise ConfigError(f"extent {extent} too small for a three-shell lesion (need >= 16)")
    rng = np.random.default_rng(seed)
    n = extent
    grid = (np.arange(n) + 0.5) / n - 0.5  # voxel centres in [-0.5, 0.5)
    z, y, x = np.meshgrid(grid, grid, grid, indexing="ij")

    head_axes = rng.uniform(0.40, 0.47, size=3)
    head = (z / head_axes[0]) ** 2 + (y / head_axes[1]) ** 2 + (x / head_axes[2]) ** 2 <= 1.0

    # Edema radii as a fraction of the volume; the rim and core are scaled copies.
    edema_axes = rng.uniform(0.22, 0.30, size=3)
    rim_scale = rng.uniform(0.68, 0.78)
    core_scale = rng.uniform(0.40, 0.50)
    limit = head_axes.min() - edema_axes.max() - 0.02
    centre = rng.uniform(-limit, limit, size=3) if limit > 0 else np.zeros(3)
    r2 = ((z - centre[0]) / edema_axes[0]) ** 2 + ((y - centre[1]) / edema_axes[1]) ** 2 + (
        (x - centre[2]) / edema_axes[2]
    ) ** 2

    labels = np.zeros((n, n, n), dtype=np.uint8)
    labels[r2 <= 1.0] = 2
    labels[r2 <= rim_scale**2] = 4
    labels[r2 <= core_scale**2] = 1
    labels[~head] = 0

    image = np.empty((4, n, n, n))
    tissue = np.array(_TISSUE).reshape(4, 1, 1, 1)
    image[:] = np.where(head[None], tissue, np.array(_AIR).reshape(4, 1, 1, 1))
    for code, profile in _PROFILES.items():
        mask = labels == code
        level = 1.0 + LESION_CONTRAST * (np.array(profile) - 1.0)
        image[:, mask] = level[:, None]
    # Slow per-channel bias across the head, amplitude 5% of contrast.
    bias = 1.0 + 0.05 * np.tanh(3 * (rng.normal(size=(4, 1, 1, 1)) * z[None] + rng.normal(size=(4, 1, 1, 1)) * x[None]))
    image *= bias
    image += rng.normal(scale=NOISE_SIGMA, size=image.shape) * head[None]
    return Subject(subject_id or f"phantom{seed:04d}", image, labels)


def standardize(image: np.ndarray) -> np.ndarray:
    """Global zero-mean / unit-variance, then scale to max |voxel| = 1."""
    image = np.asarray(image, dtype=np.float64)
    sd = image.std()
    if not np.isfinite(sd) or sd == 0.0:
        raise ConfigError("cannot standardize a constant volume")
    out = (image - image.mean()) / sd
    return out / np.abs(out).max()


def _resize_axis_linear(arr: np.ndarray, axis: int, new: int) -> np.ndarray:
    old = arr.shape[axis]
    if old == new:
        return arr
    # Align voxel centres: sample at (i + 0.5) * old / new - 0.5, clamped at the edges.
    pos = np.clip((np.arange(new) + 0.5) * old / new - 0.5, 0, old - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, old - 1)
    w = pos - lo
    shape = [1] * arr.ndim
    shape[axis] = new
    w = w.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1 - w) + np.take(arr, hi, axis=axis) * w


def resize(image: np.ndarray, labels: np.ndarray, target_extent: int) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear resize of the image, nearest-neighbour resize of the labels."""
    if target_extent < 1:
        raise ConfigError(f"invalid target extent {target_extent}")
    out = image
    for axis in (1, 2, 3):
        out = _resize_axis_linear(out, axis, target_extent)
    lab = labels
    for axis in range(3):
        old = lab.shape[axis]
        if old != target_extent:
            idx = np.minimum(((np.arange(target_extent) + 0.5) * old / target_extent).astype(int), old - 1)
            lab = np.take(lab, idx, axis=axis)
    return out, lab


def preprocess(subject: Subject, extent: int | None = None) -> Subject:
    image, labels = subject.image, subject.labels
    if extent is not None and image.shape[1:] != (extent,) * 3:
        image, labels = resize(image, labels, extent)
    return Subject(subject.subject_id, standardize(image), labels)


def make_dataset(n_subjects: int, extent: int = 32, seed: int = 0, test_fraction: float = 0.2) -> Dataset:
    """Generate, standardize and split ``n_subjects`` phantoms."""
    subjects = [preprocess(generate_phantom(seed * 100_003 + i, extent, f"s{i:03d}")) for i in range(n_subjects)]
    return split_dataset(subjects, test_fraction, seed)


def split_dataset(subjects: list[Subject], test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = int(round(len(subjects) * test_fraction))
    if n_test == 0 or n_test == len(subjects):
        raise ConfigError(f"{len(subjects)} subjects with test_fraction {test_fraction} leaves an empty split")
    order = np.random.default_rng(seed).permutation(len(subjects))
    test_idx = set(order[:n_test].tolist())
    return Dataset(
        train=[s for i, s in enumerate(subjects) if i not in test_idx],
        test=[s for i, s in enumerate(subjects) if i in test_idx],
    )


# -- geometric augmentation ---------------------------------------------------


def random_flip_rotate(image: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Axial 90-degree rotation, axis flips and an in-plane transpose; no interpolation.

    The same transform is applied to both arrays; their last three axes are
    the spatial ones (leading channel axes are left alone).
    """
    k = int(rng.integers(4))
    flips = rng.random(3) < 0.5
    transpose = bool(rng.random() < 0.5)

    def apply(arr: np.ndarray) -> np.ndarray:
        arr = np.rot90(arr, k, axes=(-2, -1))
        for ax in range(3):
            if flips[ax]:
                arr = np.flip(arr, axis=ax - 3)
        if transpose:
            arr = np.swapaxes(arr, -2, -1)
        return np.ascontiguousarray(arr)

    return apply(image), apply(labels)


# -- files --------------------------------------------------------------------
#
# magic (4 bytes) | u32 version | u32 dtype code | u32 rank | u32 extents[rank]
# | little-endian payload (float64 for volumes, uint8 external codes for labels)


def _header(magic: bytes, dtype_code: int, shape: tuple[int, ...]) -> bytes:
    return magic + struct.pack(f"<III{len(shape)}I", FILE_VERSION, dtype_code, len(shape), *shape)


def volume_bytes(image: np.ndarray) -> bytes:
    return _header(VOLUME_MAGIC, DTYPE_FLOAT64, image.shape) + np.ascontiguousarray(image, dtype="<f8").tobytes()


def label_bytes(labels: np.ndarray) -> bytes:
    to_internal(labels)  # validates codes
    return _header(LABEL_MAGIC, DTYPE_UINT8, labels.shape) + np.ascontiguousarray(labels, dtype=np.uint8).tobytes()


def save_volume(image: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(volume_bytes(image))


def save_labels(labels: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(label_bytes(labels))


def _read(path: Path, magic: bytes, dtype_code: int, item: int) -> tuple[tuple[int, ...], bytes]:
    data = path.read_bytes()
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    if data[:4] != magic:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    version, code, rank = struct.unpack("<III", data[4:16])
    if version != FILE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code != dtype_code:
        raise FormatError(f"{path}: dtype code {code}, expected {dtype_code}")
    end = 16 + 4 * rank
    if len(data) < end:
        raise FormatError(f"{path}: truncated extents")
    shape = struct.unpack(f"<{rank}I", data[16:end])
    payload = int(np.prod(shape)) * item
    if len(data) != end + payload:
        raise FormatError(f"{path}: payload is {len(data) - end} bytes, header declares {payload}")
    return tuple(shape), data[end:]


def load_volume(path: str | Path) -> np.ndarray:
    shape, payload = _read(Path(path), VOLUME_MAGIC, DTYPE_FLOAT64, 8)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def load_labels(path: str | Path) -> np.ndarray:
    shape, payload = _read(Path(path), LABEL_MAGIC, DTYPE_UINT8, 1)
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()
    to_internal(labels)
    return labels
