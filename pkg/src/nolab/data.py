"""MNIST IDX ingestion, a synthetic image generator, and minibatch planning."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ValueError(f"images must be (n, c, h, w) with n >= 1, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise CountMismatchError(f"{self.images.shape[0]} images but labels shaped {self.labels.shape}")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("pixels must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.classes)

    def head(self, n: int) -> "Dataset":
        return self.subset(slice(0, n))


def _read_idx(path, magic: int, what: str) -> tuple[list[int], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedPayloadError(f"{path}: {len(raw)} bytes is too short for an IDX header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x} is not the {what} magic 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedPayloadError(f"{path}: header declares {ndim} dims but the file ends early")
    dims = list(struct.unpack(f">{ndim}I", raw[4:header]))
    expected = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, dims {dims} need {expected}")
    return dims, payload[:expected]


def load_idx(images_path, labels_path, classes: int = 10) -> Dataset:
    """Read an IDX image/label pair; images become (n, 1, rows, cols) in [0, 1]."""
    dims, pix = _read_idx(images_path, IMAGE_MAGIC, "image")
    if len(dims) != 3:
        raise IdxFormatError(f"{images_path}: image file must have 3 dims, found {dims}")
    ldims, lab = _read_idx(labels_path, LABEL_MAGIC, "label")
    if len(ldims) != 1:
        raise IdxFormatError(f"{labels_path}: label file must have 1 dim, found {ldims}")
    if dims[0] != ldims[0]:
        raise CountMismatchError(f"{dims[0]} images but {ldims[0]} labels")
    n, rows, cols = dims
    images = np.frombuffer(pix, dtype=np.uint8).reshape(n, 1, rows, cols) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, classes)


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels_u8: np.ndarray) -> None:
    """Serialize uint8 arrays to IDX; (n, rows, cols) images and (n,) labels."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IMAGE_MAGIC))
        fh.write(struct.pack(">3I", *images_u8.shape))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">I", LABEL_MAGIC))
        fh.write(struct.pack(">I", labels_u8.shape[0]))
        fh.write(labels_u8.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def mnist_dir() -> Path:
    return Path(os.environ.get("NOLAB_MNIST_DIR", "data/mnist"))


def load_mnist(split: str = "train", root=None) -> Dataset:
    root = Path(root) if root is not None else mnist_dir()
    img, lab = MNIST_FILES[split]
    return load_idx(root / img, root / lab)


def synth_dataset(classes: int, n: int, seed: int, size: int = 8, channels: int = 1) -> Dataset:
    """Gaussian-blob images, one blob centre per class, classes balanced within one.

    Each class owns a fixed random centre; a sample is a blob around its class
    centre with jittered position and additive pixel noise, clipped to [0, 1].
    """
    if classes < 2 or n < classes:
        raise ValueError("need classes >= 2 and n >= classes")
    rng = np.random.default_rng(seed)
    centres = rng.uniform(1.5, size - 2.5, size=(classes, 2))
    tint = rng.uniform(0.4, 1.0, size=(classes, channels))
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size]
    pos = centres[labels] + rng.normal(0, 0.35, size=(n, 2))
    d2 = (yy[None] - pos[:, 0, None, None]) ** 2 + (xx[None] - pos[:, 1, None, None]) ** 2
    blob = np.exp(-d2 / 2.0)
    images = blob[:, None] * tint[labels][:, :, None, None]
    images = images + rng.normal(0, 0.05, size=images.shape)
    return Dataset(np.clip(images, 0.0, 1.0), labels, classes)


@dataclass(frozen=True)
class BatchPlan:
    k: int
    seed: int = 0
    drop_last: bool = False
    shuffle: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("batch size must be >= 1")


def epoch_order(n: int, plan: BatchPlan, epoch: int = 0) -> np.ndarray:
    if not plan.shuffle:
        return np.arange(n)
    rng = np.random.default_rng(np.random.SeedSequence([plan.seed, epoch]))
    return rng.permutation(n)


def index_batches(n: int, plan: BatchPlan, epoch: int = 0) -> Iterator[np.ndarray]:
    if plan.k > n:
        raise ValueError(f"batch size {plan.k} exceeds dataset size {n}")
    order = epoch_order(n, plan, epoch)
    stop = n - n % plan.k if plan.drop_last else n
    for start in range(0, stop, plan.k):
        yield order[start : start + plan.k]


def batches(dataset: Dataset, plan: BatchPlan, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray, int]]:
    """Yield ``(X, Y, batch_index)``; the order depends only on (seed, epoch)."""
    for b, idx in enumerate(index_batches(len(dataset), plan, epoch)):
        yield dataset.images[idx], dataset.labels[idx], b
