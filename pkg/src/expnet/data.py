"""Dataset loading, synthetic data, and the pad-and-flip augmentation.

Two binary formats are supported bit-exactly: IDX (big-endian, the MNIST
container) and the CIFAR-10 batch format (3073-byte records). Both loaders
refuse malformed files with errors naming the byte position, and never
return a partially-read dataset. Pixels are scaled to [0, 1] with no other
normalization so the first quantized layer sees its expected input domain.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073


@dataclass
class Dataset:
    """Images in [0, 1] (N, C, H, W) with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError("images must be a 4D (N, C, H, W) array")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"image count {self.images.shape[0]} != label count {self.labels.shape[0]}"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.images.shape[0]


def load_idx(images_path, labels_path, split: str = "train",
             num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label file pair (big-endian, pixels scaled by 255)."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    img_raw = images_path.read_bytes()
    if len(img_raw) < 16:
        raise ValueError(f"{images_path}: header truncated, need 16 bytes, found {len(img_raw)}")
    magic, n, rows, cols = struct.unpack(">IIII", img_raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise ValueError(
            f"{images_path}: bad image magic 0x{magic:08x} at offset 0, "
            f"expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    want = n * rows * cols
    got = len(img_raw) - 16
    if got != want:
        raise ValueError(f"{images_path}: expected {want} pixel bytes at offset 16, found {got}")

    lab_raw = labels_path.read_bytes()
    if len(lab_raw) < 8:
        raise ValueError(f"{labels_path}: header truncated, need 8 bytes, found {len(lab_raw)}")
    lmagic, ln = struct.unpack(">II", lab_raw[:8])
    if lmagic != IDX_LABEL_MAGIC:
        raise ValueError(
            f"{labels_path}: bad label magic 0x{lmagic:08x} at offset 0, "
            f"expected 0x{IDX_LABEL_MAGIC:08x}"
        )
    if len(lab_raw) - 8 != ln:
        raise ValueError(
            f"{labels_path}: expected {ln} label bytes at offset 8, found {len(lab_raw) - 8}"
        )
    if ln != n:
        raise ValueError(f"image count {n} != label count {ln} between the two files")

    images = np.frombuffer(img_raw, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=8).astype(np.int64)
    classes = num_classes if num_classes is not None else int(labels.max()) + 1 if n else 10
    return Dataset(images / 255.0, labels, split=split, num_classes=classes)


def load_cifar10_binary(paths, split: str = "train") -> Dataset:
    """Load one or more CIFAR-10 binary batch files (label byte + RGB planes)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks, labels = [], []
    for p in paths:
        p = Path(p)
        raw = p.read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
            raise ValueError(
                f"{p}: size must be a positive multiple of {CIFAR_RECORD_BYTES} bytes, "
                f"got {len(raw)} ({len(raw) % CIFAR_RECORD_BYTES} trailing)"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(records[:, 0].astype(np.int64))
        chunks.append(records[:, 1:].reshape(-1, 3, 32, 32))
    all_labels = np.concatenate(labels)
    if all_labels.size and all_labels.max() > 9:
        raise ValueError(f"label byte {all_labels.max()} out of range [0, 9]")
    return Dataset(np.concatenate(chunks) / 255.0, all_labels, split=split, num_classes=10)


def synth_dataset(seed: int, n: int, classes: int, c: int, h: int, w: int,
                  split: str = "train") -> Dataset:
    """Deterministic class-conditional blob images for desk-scale runs.

    Each class gets a fixed spatial bump location on a ring around the image
    center; images are the bump plus Gaussian noise, clipped to [0, 1]. The
    bump-to-noise ratio is chosen so classes are linearly separable with a
    wide margin (a least-squares linear classifier scores > 90 percent).
    Same arguments, same bytes.
    """
    if min(n, classes, c, h, w) < 1:
        raise ValueError("all synthetic dataset dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    counts = [n // classes + (1 if k < n % classes else 0) for k in range(classes)]

    radius = min(h, w) / 4.0
    sigma = min(h, w) / 6.0
    yy, xx = np.mgrid[0:h, 0:w]
    images = np.zeros((n, c, h, w))
    labels = np.zeros(n, dtype=np.int64)
    pos = 0
    for k in range(classes):
        angle = 2.0 * np.pi * k / classes
        cy = (h - 1) / 2.0 + radius * np.sin(angle)
        cx = (w - 1) / 2.0 + radius * np.cos(angle)
        bump = 0.8 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        m = counts[k]
        noise = rng.normal(0.0, 0.25, size=(m, c, h, w))
        images[pos : pos + m] = np.clip(bump + noise, 0.0, 1.0)
        labels[pos : pos + m] = k
        pos += m

    order = rng.permutation(n)
    return Dataset(images[order], labels[order], split=split, num_classes=classes)


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Zero-pad, random-crop back, and horizontally flip with p = 0.5.

    Draws exactly three random values per image (crop row, crop col, flip)
    in a fixed order, so a seeded rng reproduces the batch byte-for-byte.
    """
    n, c, h, w = images.shape
    if h < 8 or w < 8:
        raise ValueError(f"augment needs spatial dims >= 8, got {h}x{w}")
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    padded[:, :, pad : pad + h, pad : pad + w] = images
    out = np.empty_like(images)
    for i in range(n):
        di = int(rng.integers(0, 2 * pad + 1))
        dj = int(rng.integers(0, 2 * pad + 1))
        crop = padded[i, :, di : di + h, dj : dj + w]
        if rng.random() < 0.5:
            crop = crop[:, :, ::-1]
        out[i] = crop
    return out


def iter_batches(
    dataset: Dataset,
    batch_size: int,
    rng: np.random.Generator | None = None,
    augment_batches: bool = False,
    aug_rng: np.random.Generator | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) minibatches; shuffled when an rng is given."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        images = dataset.images[idx]
        if augment_batches:
            images = augment(images, aug_rng if aug_rng is not None else rng)
        yield images, dataset.labels[idx]
