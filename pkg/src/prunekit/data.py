"""Datasets: a deterministic synthetic image generator, an IDX-format
loader, and a stratified holdout split."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 2051   # 0x00000803: unsigned byte, 3 dims
IDX_LABELS_MAGIC = 2049   # 0x00000801: unsigned byte, 1 dim


class DataError(Exception):
    pass


@dataclass
class LabeledImageSet:
    """Images as float [N, C, H, W] in [0, 1] with integer labels [N]."""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape} labels")
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "LabeledImageSet":
        idx = np.asarray(indices)
        return LabeledImageSet(self.images[idx], self.labels[idx], self.num_classes)


def generate_synthetic(n_per_class: int, num_classes: int = 10, image_size: int = 16,
                       noise: float = 0.15, seed: int = 0) -> LabeledImageSet:
    """Single-channel images from two texture families: the first half of the
    classes are oriented gratings (one orientation per class), the rest are
    Gaussian blobs pinned to class-specific positions. Phase, jitter, and
    additive noise vary per image; everything derives from the seed.
    """
    if n_per_class < 1 or num_classes < 2:
        raise DataError("need n_per_class >= 1 and num_classes >= 2")
    rng = np.random.default_rng(seed)
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    n_grating = (num_classes + 1) // 2
    n_blob = num_classes - n_grating
    # blob centers on a ring plus the middle, well separated
    centers = [(0.5, 0.5)]
    for k in range(max(n_blob - 1, 0)):
        a = 2 * np.pi * k / max(n_blob - 1, 1)
        centers.append((0.5 + 0.3 * np.cos(a), 0.5 + 0.3 * np.sin(a)))

    images = np.empty((num_classes * n_per_class, 1, s, s), dtype=np.float64)
    labels = np.empty(num_classes * n_per_class, dtype=np.int64)
    row = 0
    for c in range(num_classes):
        for _ in range(n_per_class):
            if c < n_grating:
                theta = np.pi * c / n_grating + rng.normal(0, 0.04)
                freq = 3.0 + rng.uniform(-0.3, 0.3)
                phase = rng.uniform(0, 2 * np.pi)
                img = 0.5 + 0.5 * np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            else:
                cx, cy = centers[c - n_grating]
                cx += rng.normal(0, 0.02)
                cy += rng.normal(0, 0.02)
                sigma = 0.10 + rng.uniform(-0.02, 0.02)
                img = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
            img = img + rng.normal(0, noise, size=(s, s))
            images[row, 0] = np.clip(img, 0.0, 1.0)
            labels[row] = c
            row += 1
    perm = rng.permutation(len(labels))
    return LabeledImageSet(images[perm], labels[perm], num_classes)


def _read_idx_header(blob: bytes, path: str, expected_magic: int, expected_dims: int):
    if len(blob) < 4:
        raise DataError(f"{path}: too short for an IDX header")
    magic = struct.unpack_from(">I", blob, 0)[0]
    if magic != expected_magic:
        raise DataError(f"{path}: IDX magic {magic}, expected {expected_magic}")
    need = 4 + 4 * expected_dims
    if len(blob) < need:
        raise DataError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack_from(f">{expected_dims}I", blob, 4)
    return dims, need


def load_idx(images_path: str, labels_path: str, num_classes: int | None = None) -> LabeledImageSet:
    """Read big-endian IDX image/label file pairs (unsigned-byte payloads).
    Pixels are scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        iblob = fh.read()
    with open(labels_path, "rb") as fh:
        lblob = fh.read()
    (n, h, w), ioff = _read_idx_header(iblob, images_path, IDX_IMAGES_MAGIC, 3)
    (nl,), loff = _read_idx_header(lblob, labels_path, IDX_LABELS_MAGIC, 1)
    if n != nl:
        raise DataError(f"{n} images but {nl} labels")
    if len(iblob) - ioff != n * h * w:
        raise DataError(f"{images_path}: payload is {len(iblob) - ioff} bytes, expected {n * h * w}")
    if len(lblob) - loff != nl:
        raise DataError(f"{labels_path}: payload is {len(lblob) - loff} bytes, expected {nl}")
    images = np.frombuffer(iblob, dtype=np.uint8, offset=ioff).reshape(n, 1, h, w)
    images = images.astype(np.float64) / 255.0
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=loff).astype(np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if n else 1)
    return LabeledImageSet(images, labels, k)


def holdout_split(data: LabeledImageSet, val_fraction: float, seed: int = 0):
    """Stratified (train, val) split. Every class keeps at least one sample on
    each side, so classes with fewer than 2 samples are rejected."""
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        if idx.size < 2:
            raise DataError(f"class {c} has {idx.size} samples; need at least 2 to split")
        idx = rng.permutation(idx)
        n_val = int(np.clip(round(val_fraction * idx.size), 1, idx.size - 1))
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    val_idx = rng.permutation(np.concatenate(val_idx))
    return data.subset(train_idx), data.subset(val_idx)
