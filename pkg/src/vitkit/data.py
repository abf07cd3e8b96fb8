"""Datasets: the CIFAR-10 binary format and a seeded synthetic classification set."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .rng import Rng

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


@dataclass
class Dataset:
    source: str
    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int

    def __len__(self):
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.source, self.images[:n], self.labels[:n], self.split, self.num_classes)

    def batches(self, batch_size: int, rng: Rng | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            yield self.images[idx], self.labels[idx]


def read_cifar10_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (n, 3, 32, 32) and labels from one CIFAR-10 binary file."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        full = raw.size // CIFAR_RECORD
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}; "
                          f"record {full} truncated at byte offset {full * CIFAR_RECORD}")
    recs = raw.reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        r = int(bad[0])
        raise FormatError(f"{path}: label {labels[r]} > 9 in record {r} at byte offset {r * CIFAR_RECORD}")
    return recs[:, 1:].reshape(-1, 3, 32, 32), labels.astype(np.int64)


def write_cifar10_file(path, images: np.ndarray, labels) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    np.concatenate([labels, images], axis=1).tofile(path)


def load_cifar10(path, split: str = "train") -> Dataset:
    """Load one file, or the standard train/test files of a directory; order is preserved."""
    if os.path.isdir(path):
        names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        files = [os.path.join(path, n) for n in names if os.path.exists(os.path.join(path, n))]
        if not files:
            raise FormatError(f"{path}: no CIFAR-10 {split} files ({', '.join(names)})")
    else:
        files = [path]
    parts = [read_cifar10_file(f) for f in files]
    raw = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    x = raw.astype(np.float32) / 255.0
    x = (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]
    return Dataset("cifar10", x, labels, split, 10)


def _frequencies(k: int) -> list[tuple[int, int]]:
    """First k distinct low-frequency (fx, fy) pairs ordered by radius."""
    r = max(2, int(math.ceil(math.sqrt(k))) + 1)
    pairs = [(fx, fy) for fx in range(0, r + 1) for fy in range(-r, r + 1)
             if (fx, fy) != (0, 0) and not (fx == 0 and fy < 0)]
    pairs.sort(key=lambda f: (f[0] ** 2 + f[1] ** 2, f))
    return pairs[:k]


def class_patterns(num_classes: int, image_size: int, channels: int = 3) -> np.ndarray:
    """(num_classes, channels, s, s) sinusoids over normalized coordinates, so patterns
    look the same at every resolution."""
    u = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(u, u, indexing="ij")
    out = np.empty((num_classes, channels, image_size, image_size))
    for c, (fx, fy) in enumerate(_frequencies(num_classes)):
        for ch in range(channels):
            phase = 2 * math.pi * ch / channels + 0.7 * c
            out[c, ch] = np.cos(2 * math.pi * (fx * xx + fy * yy) + phase)
    return out


def synth_dataset(seed: int, n: int, image_size: int = 32, num_classes: int = 10, split: str = "train",
                  noise: float = 6.0, amplitude: float = 1.0) -> Dataset:
    """Class-conditional images: a fixed class sinusoid plus Gaussian noise, balanced labels."""
    if n <= 0:
        raise ConfigError(f"dataset size must be positive, got {n}")
    rng = Rng(seed).fork(f"synth-{split}")
    labels = (np.arange(n) % num_classes)[rng.permutation(n)].astype(np.int64)
    pats = class_patterns(num_classes, image_size)
    x = amplitude * pats[labels] + noise * rng.normal((n, 3, image_size, image_size))
    x /= math.sqrt(noise ** 2 + amplitude ** 2 / 2)
    return Dataset("synthetic", x.astype(np.float32), labels, split, num_classes)
