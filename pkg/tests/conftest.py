"""Shared fixtures: a real desk-scale image corpus and trained models.

The corpus is the scikit-learn handwritten digits set (8x8, 10 classes),
written out as IDX files and read back through the package's own loader,
so every downstream test also exercises the ingestion path.
"""

import struct
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from uatforge.data import Dataset, load_idx
from uatforge.models import ModelSpec, build_model
from uatforge.training import TrainConfig, train_standard


def _digits_arrays():
    from sklearn.datasets import load_digits

    d = load_digits()
    images = (d.images / 16.0).astype(np.float64)[:, None, :, :]
    labels = d.target.astype(np.int64)
    val_mask = np.arange(len(labels)) % 5 == 4
    return images, labels, val_mask


def write_idx_pair(dirpath: Path, stem: str, images: np.ndarray, labels: np.ndarray):
    """Write (S, 1, H, W) float images in [0,1] as an IDX byte pair."""
    n, _, h, w = images.shape
    raw = np.clip(np.rint(images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    images_path = dirpath / f"{stem}-images.idx"
    labels_path = dirpath / f"{stem}-labels.idx"
    images_path.write_bytes(struct.pack(">IIII", 0x00000803, n, h, w) + raw.tobytes())
    labels_path.write_bytes(struct.pack(">II", 0x00000801, n) + bytes(labels.tolist()))
    return images_path, labels_path


@pytest.fixture(scope="session")
def digits_idx_dir(tmp_path_factory) -> Path:
    dirpath = tmp_path_factory.mktemp("digits-idx")
    images, labels, val_mask = _digits_arrays()
    write_idx_pair(dirpath, "train", images[~val_mask], labels[~val_mask])
    write_idx_pair(dirpath, "val", images[val_mask], labels[val_mask])
    return dirpath


@pytest.fixture(scope="session")
def digits_data(digits_idx_dir) -> tuple[Dataset, Dataset]:
    train_ds = load_idx(digits_idx_dir / "train-images.idx", digits_idx_dir / "train-labels.idx",
                        num_classes=10, name="digits", split="train")
    val_ds = load_idx(digits_idx_dir / "val-images.idx", digits_idx_dir / "val-labels.idx",
                      num_classes=10, name="digits", split="val")
    return train_ds, val_ds


@pytest.fixture(scope="session")
def digits16_data(digits_data) -> tuple[Dataset, Dataset]:
    """Digits upsampled 2x per side; the acceptance corpus."""
    out = []
    for ds in digits_data:
        images = np.repeat(np.repeat(ds.images, 2, axis=2), 2, axis=3)
        out.append(Dataset(images, ds.labels.copy(), 10, "digits16", ds.split))
    return tuple(out)


@pytest.fixture(scope="session")
def desk_standard(digits_data):
    """A quickly trained standard model plus its data; shared read-only."""
    train_ds, val_ds = digits_data
    model = build_model(ModelSpec("smallconv", train_ds.image_shape, 10, seed=0))
    config = TrainConfig(regime="standard", epochs=10, batch_size=64, seed=0)
    model, _ = train_standard(model, train_ds, config)
    return model, train_ds, val_ds
