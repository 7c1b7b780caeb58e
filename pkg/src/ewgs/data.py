"""Datasets: MNIST IDX files, two-moons, deterministic batching."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

#: Environment variable naming the directory that holds the MNIST IDX files.
DATA_ROOT_ENV = "EWGS_DATA_ROOT"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) == 0:
            raise ValueError("empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path: str | os.PathLike, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic number 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise IdxFormatError(f"{path}: truncated payload ({len(raw) - header} of {expected} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (images: 3-d, labels: 1-d)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_mnist_idx(images_path, labels_path, subset: Optional[int] = None, split: str = "train") -> Dataset:
    """Images scaled to [0, 1] with shape [n, 1, 28, 28]; ``subset`` keeps the first n."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxFormatError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    if subset is not None:
        if subset < 1:
            raise ValueError(f"subset size must be >= 1, got {subset}")
        images, labels = images[:subset], labels[:subset]
    x = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), split=split, num_classes=10)


def mnist_root(root: Optional[str] = None) -> Path:
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise FileNotFoundError(f"MNIST location unknown: pass data_root or set ${DATA_ROOT_ENV}")
    return Path(root)


def load_mnist(split: str = "train", root: Optional[str] = None, subset: Optional[int] = None) -> Dataset:
    images, labels = MNIST_FILES[split]
    base = mnist_root(root)
    return load_mnist_idx(base / images, base / labels, subset=subset, split=split)


# ---------------------------------------------------------------------------
# synthetic


def make_two_moons(n: int, noise: float = 0.1, seed: int = 0, split: str = "train") -> Dataset:
    """Two interleaved unit half-circles, ``n / 2`` points each, with Gaussian noise."""
    if n < 2 or n % 2:
        raise ValueError(f"n must be a positive even number, got {n}")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    outer = np.stack([np.cos(t), np.sin(t)], axis=1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    x = np.concatenate([outer, inner])
    if noise > 0:
        x = x + np.random.default_rng(seed).normal(scale=noise, size=x.shape)
    y = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    return Dataset(x.astype(np.float32), y, split=split, num_classes=2)


# ---------------------------------------------------------------------------
# batching


def batches(
    dataset: Dataset, batch_size: int, shuffle_seed: int | Sequence[int] | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(inputs, labels)`` covering every example once; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.inputs[idx], dataset.labels[idx]


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)
