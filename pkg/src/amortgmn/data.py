"""Image batches: a synthetic 8x8 grayscale task and a flat binary loader.

Binary image file layout (all little-endian)::

    offset  size  field
    0       4     magic b"IMGB"
    4       4     uint32 format version (1)
    8       4     uint32 count N
    12      4     uint32 channels C
    16      4     uint32 height H
    20      4     uint32 width W
    24      4     uint32 number of classes
    28      4*N*C*H*W  float32 pixels, row-major [N, C, H, W]
    ...     N     uint8 labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"IMGB"
_HEADER = struct.Struct("<4s6I")


@dataclass
class ImageBatch:
    pixels: np.ndarray   # [N, C, H, W] in [0, 1]
    labels: np.ndarray   # [N] int64

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.pixels) != len(self.labels):
            raise ValueError("pixels and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ImageBatch":
        return ImageBatch(self.pixels[idx], self.labels[idx])

    def sample(self, n: int, rng: np.random.Generator) -> "ImageBatch":
        n = min(n, len(self))
        return self.subset(rng.choice(len(self), size=n, replace=False))

    def resized(self, hw) -> "ImageBatch":
        """Block-average (or nearest-repeat) to another square extent."""
        h, w = self.pixels.shape[-2:]
        th, tw = hw
        if (h, w) == (th, tw):
            return self
        if h % th == 0 and w % tw == 0:
            p = self.pixels.reshape(self.pixels.shape[:2] + (th, h // th, tw, w // tw)).mean(axis=(3, 5))
        elif th % h == 0 and tw % w == 0:
            p = self.pixels.repeat(th // h, axis=-2).repeat(tw // w, axis=-1)
        else:
            raise ValueError(f"cannot resize {h}x{w} to {th}x{tw}")
        return ImageBatch(p.astype(self.pixels.dtype), self.labels)


def class_prototypes(num_classes: int = 10, hw=(8, 8), seed: int = 0) -> np.ndarray:
    """Fixed smooth random patterns, one per class, in [0.15, 0.85]."""
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(num_classes,) + tuple(hw))
    smooth = raw.copy()
    for axis in (1, 2):
        smooth += 0.6 * (np.roll(raw, 1, axis=axis) + np.roll(raw, -1, axis=axis))
    lo = smooth.min(axis=(1, 2), keepdims=True)
    hi = smooth.max(axis=(1, 2), keepdims=True)
    return 0.15 + 0.7 * (smooth - lo) / (hi - lo)


def toy_dataset(seed: int, n_train: int, n_val: int, n_test: int, noise: float = 0.45,
                hw=(8, 8), num_classes: int = 10, prototype_seed: int = 0):
    """Synthetic 10-class 8x8 grayscale data: class prototype + Gaussian noise.

    The prototypes depend only on ``prototype_seed``, so different ``seed``
    values draw fresh samples of the same task. Labels are balanced within
    each split.
    """
    if min(n_train, n_val, n_test) < num_classes:
        raise ValueError("each split needs at least one image per class")
    protos = class_prototypes(num_classes, hw, prototype_seed)
    rng = np.random.default_rng(seed)
    splits = []
    for n in (n_train, n_val, n_test):
        labels = rng.permutation(np.arange(n) % num_classes)
        pix = protos[labels] + noise * rng.normal(size=(n,) + tuple(hw))
        pix = np.clip(pix, 0.0, 1.0).astype(np.float32)[:, None]
        splits.append(ImageBatch(pix, labels))
    return tuple(splits)


def save_images(path, batch: ImageBatch, num_classes: int = 10) -> None:
    n, c, h, w = batch.pixels.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, 1, n, c, h, w, num_classes))
        fh.write(np.ascontiguousarray(batch.pixels, dtype="<f4").tobytes())
        fh.write(batch.labels.astype(np.uint8).tobytes())


def load_images(path) -> ImageBatch:
    raw = Path(path).read_bytes()
    magic, version, n, c, h, w, _classes = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != 1:
        raise ValueError(f"{path}: not an image file (magic {magic!r}, version {version})")
    start = _HEADER.size
    count = n * c * h * w
    pix = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=start + 4 * count)
    return ImageBatch(pix.astype(np.float32), labels.astype(np.int64))
