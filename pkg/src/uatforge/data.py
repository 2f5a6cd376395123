"""Dataset ingestion, batching, and per-class partitioning.

All loaders normalize pixels into [0, 1] and keep them there; the attack
budget epsilon is expressed in those units everywhere in the package.
Supported sources: IDX image/label file pairs, CIFAR-10 binary batches
(3073-byte records), and a seeded synthetic generator for fast runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .errors import DataFormatError
from .rng import TAG_EPOCH, TAG_SYNTH_SAMPLES, TAG_SYNTH_TEMPLATES, rng_from

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073

_SPLIT_IDS = {"train": 0, "val": 1}


@dataclass
class LabeledSample:
    image: Tensor  # (C, H, W), values in [0, 1]
    label: int


@dataclass
class Dataset:
    """Immutable labeled image collection."""

    images: np.ndarray  # (S, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (S,) int64
    num_classes: int
    name: str
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) == 0:
            raise DataFormatError(f"{self.name}: expected a nonempty (S, C, H, W) image array")
        if len(self.labels) != len(self.images):
            raise DataFormatError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataFormatError(f"{self.name}: label outside [0, {self.num_classes})")
        lo, hi = self.images.min(), self.images.max()
        if lo < 0.0 or hi > 1.0:
            raise DataFormatError(f"{self.name}: pixel range [{lo}, {hi}] outside [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(Tensor(self.images[i]), int(self.labels[i]))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def restrict_to_class(self, c: int) -> "Dataset":
        mask = self.labels == c
        if not mask.any():
            raise DataFormatError(f"{self.name}: no samples with class {c}")
        return Dataset(self.images[mask], self.labels[mask], self.num_classes,
                       f"{self.name}[class={c}]", self.split)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class Batch:
    images: Tensor  # (B, C, H, W)
    labels: np.ndarray  # (B,)
    indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


# ---------------------------------------------------------------------------
# loaders


def _read_idx(path, expected_magic: int, what: str) -> tuple[np.ndarray, tuple[int, ...]]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated {what} file, no magic")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad {what} magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndims = magic & 0xFF
    header_len = 4 + 4 * ndims
    if len(raw) < header_len:
        raise DataFormatError(f"{path}: truncated {what} header")
    dims = struct.unpack_from(f">{ndims}I", raw, 4)
    expected = int(np.prod(dims))
    body = raw[header_len:]
    if len(body) < expected:
        raise DataFormatError(f"{path}: truncated {what} payload, {len(body)} bytes for {expected} expected")
    if len(body) > expected:
        raise DataFormatError(f"{path}: {what} payload has {len(body) - expected} trailing bytes")
    return np.frombuffer(body, dtype=np.uint8), dims


def load_idx(images_path, labels_path, num_classes: int = 10, name: str | None = None,
             split: str = "train") -> Dataset:
    """Load an IDX image/label file pair (the MNIST family layout).

    Pixels are scaled by 1/255 into [0, 1]; images come out as 1xHxW.
    """
    pixels, (count, rows, cols) = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels, (label_count,) = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if count != label_count:
        raise DataFormatError(f"{images_path}: {count} images but {labels_path} has {label_count} labels")
    images = pixels.astype(np.float64).reshape(count, 1, rows, cols) / 255.0
    return Dataset(images, labels.astype(np.int64), num_classes,
                   name or Path(images_path).stem, split)


def load_cifar_binary(paths, num_classes: int = 10, name: str = "cifar10",
                      split: str = "train") -> Dataset:
    """Load CIFAR-10 binary batch files (1 label byte + 3072 pixel bytes each)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    all_images, all_labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
            raise DataFormatError(
                f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0].astype(np.int64)
        if labels.max() >= num_classes:
            raise DataFormatError(f"{path}: label {labels.max()} >= {num_classes}")
        all_images.append(records[:, 1:].astype(np.float64).reshape(-1, 3, 32, 32) / 255.0)
        all_labels.append(labels)
    return Dataset(np.concatenate(all_images), np.concatenate(all_labels),
                   num_classes, name, split)


def generate_synthetic(num_classes: int, per_class: int, shape: tuple[int, int, int],
                       noise: float, seed: int, split: str = "train",
                       name: str = "synthetic") -> Dataset:
    """Per-class template images plus bounded uniform noise, clipped to [0, 1].

    Templates depend only on (seed, num_classes, shape), so train and val
    splits of the same seed describe the same classification task; the
    noise stream differs per split. With noise 0 every sample equals its
    class template exactly.
    """
    if num_classes < 2 or per_class < 1:
        raise DataFormatError(f"need num_classes >= 2 and per_class >= 1, got {num_classes}, {per_class}")
    if split not in _SPLIT_IDS:
        raise DataFormatError(f"split must be one of {sorted(_SPLIT_IDS)}, got {split!r}")
    shape = tuple(int(d) for d in shape)
    templates = rng_from(seed, TAG_SYNTH_TEMPLATES).uniform(0.0, 1.0, size=(num_classes,) + shape)
    sample_rng = rng_from(seed, TAG_SYNTH_SAMPLES, _SPLIT_IDS[split])
    images = np.repeat(templates, per_class, axis=0)
    if noise > 0.0:
        images = images + sample_rng.uniform(-noise, noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    return Dataset(images, labels, num_classes, name, split)


# ---------------------------------------------------------------------------
# batching and per-class partitioning


def iterate_batches(dataset: Dataset, batch_size: int, seed: int = 0,
                    shuffle: bool = True) -> Iterator[Batch]:
    """One epoch of batches; every sample appears exactly once.

    With shuffle, the order is a permutation drawn from the seed, so the
    same seed always reproduces the same batch sequence. The final short
    batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng_from(seed, TAG_EPOCH).permutation(len(dataset)) if shuffle \
        else np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield Batch(Tensor(dataset.images[idx]), dataset.labels[idx].copy(), idx.copy())


def partition_by_class(batch: Batch) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Split a batch by ground-truth class.

    Returns {class: (images (n_c, C, H, W), positions into the batch)}.
    Positions make the partition invertible; see ``reassemble_rows``.
    """
    groups: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for c in np.unique(batch.labels):
        pos = np.nonzero(batch.labels == c)[0]
        groups[int(c)] = (batch.images.data[pos], pos)
    return groups


def reassemble_rows(parts: dict[int, np.ndarray], positions: dict[int, np.ndarray],
                    total: int) -> np.ndarray:
    """Inverse of partition_by_class on the image rows."""
    out = None
    for c, rows in parts.items():
        pos = positions[c]
        if out is None:
            out = np.empty((total,) + rows.shape[1:], dtype=np.float64)
        out[pos] = rows
    assert out is not None
    return out
