"""MNIST (IDX) and CIFAR-10 (binary version) loaders.

Both loaders return ``(train, test)`` :class:`Dataset` objects holding
normalized float32 images in ``(n, c, h, w)`` layout and int64 labels.
Iteration yields :class:`LabeledBatch` values; shuffling and augmentation are
driven by an explicit seed so a stream is reproducible.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, LengthMismatch, MagicMismatch, RecordSizeMismatch

DATA_ENV = "DYBNN_DATA"

MNIST_MEAN, MNIST_STD = 0.1307, 0.3081
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)
CIFAR_RECORD = 3073
IDX_IMAGES, IDX_LABELS = 2051, 2049


@dataclass(frozen=True)
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


class Dataset:
    """In-memory labeled images with seeded batch iteration.

    ``augment`` enables pad-4 random crop plus horizontal flip (CIFAR practice)
    when iterating with ``augment=True``.
    """

    def __init__(self, images, labels, classes=10, name="", augmentable=False):
        if len(images) != len(labels):
            raise LengthMismatch(f"{name}: {len(images)} images but {len(labels)} labels")
        self.images = images
        self.labels = labels
        self.classes = classes
        self.name = name
        self.augmentable = augmentable

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, count=None, start=0):
        stop = len(self) if count is None else min(len(self), start + count)
        return Dataset(self.images[start:stop], self.labels[start:stop], self.classes,
                       self.name, self.augmentable)

    def batches(self, batch_size, shuffle=False, seed=0, augment=False, drop_last=False):
        n = len(self)
        rng = np.random.default_rng(seed)
        order = rng.permutation(n) if shuffle else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            images = self.images[idx]
            if augment and self.augmentable:
                images = augment_crop_flip(images, rng)
            yield LabeledBatch(images, self.labels[idx])

    def num_batches(self, batch_size, drop_last=False):
        return len(self) // batch_size if drop_last else -(-len(self) // batch_size)


def augment_crop_flip(images, rng, pad=4):
    """Random ``pad``-pixel translation crop and horizontal flip per image."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def default_data_root():
    return Path(os.environ.get(DATA_ENV, "data"))


# ---------------------------------------------------------------------------
# MNIST


def _open(path: Path):
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise FileNotFoundError(f"missing {path} (or {gz.name})")


def read_idx(path) -> np.ndarray:
    """Read an IDX image (magic 2051) or label (magic 2049) file."""
    path = Path(path)
    raw = _open(path)
    if len(raw) < 8:
        raise MagicMismatch(f"{path.name}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_LABELS:
        (count,) = struct.unpack(">I", raw[4:8])
        shape, offset = (count,), 8
    elif magic == IDX_IMAGES:
        if len(raw) < 16:
            raise MagicMismatch(f"{path.name}: file too short for an IDX image header")
        count, rows, cols = struct.unpack(">III", raw[4:16])
        shape, offset = (count, rows, cols), 16
    else:
        raise MagicMismatch(f"{path.name}: magic {magic} is neither {IDX_IMAGES} nor {IDX_LABELS}")
    expected = int(np.prod(shape))
    if len(raw) - offset != expected:
        raise LengthMismatch(
            f"{path.name}: header declares {expected} values, file holds {len(raw) - offset}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(shape)


def _mnist_split(root, prefix):
    images = read_idx(root / f"{prefix}-images-idx3-ubyte")
    labels = read_idx(root / f"{prefix}-labels-idx1-ubyte")
    if images.ndim != 3:
        raise MagicMismatch(f"{prefix}-images-idx3-ubyte: expected image magic {IDX_IMAGES}")
    if labels.ndim != 1:
        raise MagicMismatch(f"{prefix}-labels-idx1-ubyte: expected label magic {IDX_LABELS}")
    if len(images) != len(labels):
        raise LengthMismatch(f"{prefix}: {len(images)} images but {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0 - MNIST_MEAN) / MNIST_STD
    return Dataset(x[:, None].astype(np.float32), labels.astype(np.int64), 10, f"mnist-{prefix}")


def load_mnist(directory):
    """Return ``(train, test)`` from the four standard IDX files in ``directory``."""
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"MNIST directory {root} does not exist")
    return _mnist_split(root, "train"), _mnist_split(root, "t10k")


# ---------------------------------------------------------------------------
# CIFAR-10


def read_cifar_batch(path):
    """Return ``(uint8 images (n, 3, 32, 32), uint8 labels)`` from one batch file."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise RecordSizeMismatch(
            f"{path.name}: size {len(raw)} is not a multiple of {CIFAR_RECORD}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    if labels.size and labels.max() > 9:
        raise DataError(f"{path.name}: label {labels.max()} outside [0, 9]")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def _normalize_cifar(images):
    x = images.astype(np.float32) / 255.0
    return ((x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]).astype(np.float32)


def load_cifar10(directory):
    """Return ``(train, test)`` from the binary-version CIFAR-10 batch files.

    ``directory`` may point at the extracted ``cifar-10-batches-bin`` folder
    or at its parent.
    """
    root = Path(directory)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    if not root.is_dir():
        raise FileNotFoundError(f"CIFAR-10 directory {root} does not exist")
    parts = [read_cifar_batch(root / f"data_batch_{i}.bin") for i in range(1, 6)]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = read_cifar_batch(root / "test_batch.bin")
    train = Dataset(_normalize_cifar(train_x), train_y.astype(np.int64), 10, "cifar10-train", augmentable=True)
    test = Dataset(_normalize_cifar(test_x), test_y.astype(np.int64), 10, "cifar10-test")
    return train, test


def load_dataset(name, directory=None):
    """Dispatch on ``name`` in {"mnist", "cifar10"}; default dir is ``$DYBNN_DATA/<name>``."""
    root = Path(directory) if directory else default_data_root() / name
    if name == "mnist":
        return load_mnist(root)
    if name in ("cifar10", "cifar-10"):
        return load_cifar10(root)
    raise DataError(f"unknown dataset {name!r}")
