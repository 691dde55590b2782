"""Dataset ingestion: CIFAR-style binary records, IDX files, and a
deterministic synthetic generator used for desk-scale experiments.

All loaders return uint8 images shaped (N, H, W, C) with int64 labels,
in a deterministic order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .seeding import derive_seed, numpy_rng

CIFAR_SIDE = 32
CIFAR_CHANNELS = 3


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    class_count: int

    def validate(self) -> None:
        for split, (images, labels) in (
            ("train", (self.train_images, self.train_labels)),
            ("test", (self.test_images, self.test_labels)),
        ):
            if images.ndim != 4 or images.dtype != np.uint8:
                raise DataError(f"{split} images must be uint8 (N, H, W, C)")
            if len(images) != len(labels):
                raise DataError(f"{split}: {len(images)} images vs {len(labels)} labels")
            if len(labels) and (labels.min() < 0 or labels.max() >= self.class_count):
                raise DataError(
                    f"{split} labels outside [0, {self.class_count}): "
                    f"{labels.min()}..{labels.max()}"
                )

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_images.shape[1:])

    def bytes_per_image(self) -> int:
        h, w, c = self.image_shape
        return h * w * c


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-blob classes: identical spec -> byte-identical dataset.

    ``pattern_mix`` blends a class-independent background into every class
    mean; raising it shrinks between-class distances, which is the knob
    that makes the desk-scale stream genuinely forgettable.
    """

    class_count: int = 10
    samples_per_class: int = 100
    test_per_class: int = 30
    image_side: int = 16
    channels: int = 3
    blob_seed: int = 7
    noise: float = 0.1
    pattern_mix: float = 0.0

    def validate(self) -> None:
        if min(self.class_count, self.samples_per_class, self.test_per_class,
               self.image_side, self.channels) < 1:
            raise ConfigError("synthetic spec dims must be positive")
        if self.noise < 0:
            raise ConfigError("synthetic noise must be non-negative")
        if not 0.0 <= self.pattern_mix < 1.0:
            raise ConfigError("pattern_mix must lie in [0, 1)")


def _blob_image(spec: SyntheticSpec, label) -> np.ndarray:
    rng = numpy_rng(derive_seed(spec.blob_seed, "pattern", label))
    side = spec.image_side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    pattern = np.zeros((side, side, spec.channels))
    for _ in range(3):
        cy, cx = rng.uniform(0, side, size=2)
        sigma = rng.uniform(side / 8.0, side / 3.0)
        amp = rng.uniform(0.2, 1.0, size=spec.channels)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))
        pattern += bump[:, :, None] * amp[None, None, :]
    lo, hi = pattern.min(), pattern.max()
    if hi - lo < 1e-12:
        return np.full_like(pattern, 0.5)
    return 0.1 + 0.8 * (pattern - lo) / (hi - lo)


def _class_pattern(spec: SyntheticSpec, class_id: int) -> np.ndarray:
    """Smooth per-class mean image in [0.1, 0.9], shape (H, W, C)."""
    unique = _blob_image(spec, class_id)
    if spec.pattern_mix == 0.0:
        return unique
    background = _blob_image(spec, "background")
    return spec.pattern_mix * background + (1.0 - spec.pattern_mix) * unique


def _render_split(spec: SyntheticSpec, split: str, per_class: int) -> tuple[np.ndarray, np.ndarray]:
    images = []
    labels = []
    for c in range(spec.class_count):
        pattern = _class_pattern(spec, c)
        rng = numpy_rng(derive_seed(spec.blob_seed, split, c))
        noise = rng.standard_normal((per_class,) + pattern.shape) * spec.noise
        batch = np.clip(pattern[None] + noise, 0.0, 1.0)
        images.append(np.round(batch * 255.0).astype(np.uint8))
        labels.append(np.full(per_class, c, dtype=np.int64))
    return np.concatenate(images), np.concatenate(labels)


def synth_dataset(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    train_images, train_labels = _render_split(spec, "train", spec.samples_per_class)
    test_images, test_labels = _render_split(spec, "test", spec.test_per_class)
    dataset = Dataset(train_images, train_labels, test_images, test_labels, spec.class_count)
    dataset.validate()
    return dataset


def _read_cifar_records(path: Path, class_count: int) -> tuple[np.ndarray, np.ndarray]:
    record = 1 + CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % record != 0:
        raise DataError(f"{path}: size {len(raw)} is not a multiple of {record}-byte records")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = data[:, 0].astype(np.int64)
    if labels.max(initial=0) >= class_count:
        raise DataError(f"{path}: label {labels.max()} >= class_count {class_count}")
    images = (
        data[:, 1:]
        .reshape(-1, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE)
        .transpose(0, 2, 3, 1)
        .copy()
    )
    return images, labels


def _collect(directory: Path, patterns: list[str]) -> list[Path]:
    for pattern in patterns:
        found = sorted(directory.glob(pattern))
        if found:
            return found
    return []


def load_cifar_binary(directory: str | Path, class_count: int) -> Dataset:
    """Directory of train/test record files: 1 label byte + 3072 image bytes."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    train_files = _collect(directory, ["train*.bin", "data_batch_*.bin"])
    test_files = _collect(directory, ["test*.bin", "test_batch*.bin"])
    if not train_files or not test_files:
        raise DataError(f"{directory}: need train*.bin/data_batch_*.bin and test*.bin")
    train_parts = [_read_cifar_records(p, class_count) for p in train_files]
    test_parts = [_read_cifar_records(p, class_count) for p in test_files]
    dataset = Dataset(
        np.concatenate([p[0] for p in train_parts]),
        np.concatenate([p[1] for p in train_parts]),
        np.concatenate([p[0] for p in test_parts]),
        np.concatenate([p[1] for p in test_parts]),
        class_count,
    )
    dataset.validate()
    return dataset


IDX_UBYTE = 0x08


def read_idx(path: str | Path) -> np.ndarray:
    """One IDX file: big-endian magic (0, 0, dtype, ndim) then dims and data."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    zero1, zero2, dtype, ndim = struct.unpack_from(">BBBB", raw, 0)
    if zero1 != 0 or zero2 != 0:
        raise DataError(f"{path}: bad IDX magic {raw[:4]!r}")
    if dtype != IDX_UBYTE:
        raise DataError(f"{path}: unsupported IDX dtype 0x{dtype:02x}")
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    numel = int(np.prod(dims)) if ndim else 1
    offset = 4 + 4 * ndim
    if len(raw) != offset + numel:
        raise DataError(f"{path}: expected {numel} data bytes, found {len(raw) - offset}")
    return np.frombuffer(raw, dtype=np.uint8, count=numel, offset=offset).reshape(dims).copy()


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    blob = struct.pack(">BBBB", 0, 0, IDX_UBYTE, array.ndim)
    blob += struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(blob + array.tobytes())


def _find_idx(directory: Path, names: list[str]) -> Path:
    for name in names:
        candidate = directory / name
        if candidate.exists():
            return candidate
    raise DataError(f"{directory}: none of {names} found")


def load_idx_dataset(directory: str | Path, class_count: int) -> Dataset:
    """Directory holding train/test image and label IDX files."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    files = {
        "train_images": ["train-images.idx", "train-images-idx3-ubyte"],
        "train_labels": ["train-labels.idx", "train-labels-idx1-ubyte"],
        "test_images": ["test-images.idx", "t10k-images-idx3-ubyte"],
        "test_labels": ["test-labels.idx", "t10k-labels-idx1-ubyte"],
    }
    arrays = {key: read_idx(_find_idx(directory, names)) for key, names in files.items()}
    for split in ("train", "test"):
        images = arrays[f"{split}_images"]
        if images.ndim == 3:
            arrays[f"{split}_images"] = images[..., None]
        elif images.ndim != 4:
            raise DataError(f"{split} images: expected 3 or 4 IDX dims, got {images.ndim}")
    dataset = Dataset(
        arrays["train_images"],
        arrays["train_labels"].astype(np.int64),
        arrays["test_images"],
        arrays["test_labels"].astype(np.int64),
        class_count,
    )
    dataset.validate()
    return dataset


def ingest_dataset(fmt: str, path: str | Path | None, class_count: int,
                   synth_spec: SyntheticSpec | None = None) -> Dataset:
    if fmt == "synthetic":
        spec = synth_spec or SyntheticSpec(class_count=class_count)
        if spec.class_count != class_count:
            raise ConfigError(
                f"synthetic class_count {spec.class_count} != configured {class_count}"
            )
        return synth_dataset(spec)
    if path is None:
        raise ConfigError(f"dataset format {fmt!r} requires a dataset path")
    if fmt == "cifar-binary":
        return load_cifar_binary(path, class_count)
    if fmt == "idx":
        return load_idx_dataset(path, class_count)
    raise ConfigError(f"unknown dataset format {fmt!r}")
