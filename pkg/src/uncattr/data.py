"""Dataset ingestion: big-endian IDX files and the synthetic fallback set.

The synthetic set is two classes of 16x16 grayscale shapes (filled disc vs.
hollow ring) with jittered geometry and additive Gaussian noise, clipped to
[0, 1].  It is linearly separable and cheap enough for the full evaluation
harness, and is used whenever no IDX dataset is available.
"""

from __future__ import annotations

import struct

import numpy as np

from .models import Dataset

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
_MAX_ELEMENTS = 100_000_000


class IdxFormatError(Exception):
    """Bad magic, impossible dimensions, or truncated IDX payload."""


def _read_u32(fh, what):
    buf = fh.read(4)
    if len(buf) != 4:
        raise IdxFormatError(f"truncated IDX header while reading {what}")
    return struct.unpack(">I", buf)[0]


def read_idx_images(path) -> np.ndarray:
    """(count, rows, cols) float64 images scaled to [0, 1]."""
    with open(path, "rb") as fh:
        magic = _read_u32(fh, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"bad magic 0x{magic:08x}, expected image magic 0x{IDX_IMAGE_MAGIC:08x}"
            )
        count = _read_u32(fh, "count")
        rows = _read_u32(fh, "rows")
        cols = _read_u32(fh, "cols")
        total = count * rows * cols
        if total > _MAX_ELEMENTS:
            raise IdxFormatError(f"dimension overflow: {count}x{rows}x{cols}")
        payload = fh.read(total)
        if len(payload) != total:
            raise IdxFormatError(
                f"truncated payload: expected {total} bytes, got {len(payload)}"
            )
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_u32(fh, "magic")
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"bad magic 0x{magic:08x}, expected label magic 0x{IDX_LABEL_MAGIC:08x}"
            )
        count = _read_u32(fh, "count")
        if count > _MAX_ELEMENTS:
            raise IdxFormatError(f"dimension overflow: {count} labels")
        payload = fh.read(count)
        if len(payload) != count:
            raise IdxFormatError(
                f"truncated payload: expected {count} bytes, got {len(payload)}"
            )
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def ingest_idx(images_path, labels_path, split="train", limit=None) -> Dataset:
    """Load an images/labels IDX pair into a dataset."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(
            f"count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images=images, labels=labels, split=split)


def gen_synthetic(seed, count, side=16, split="train") -> Dataset:
    """Two-class disc-vs-ring images, deterministic for a given seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    images = np.zeros((count, side, side))
    labels = np.zeros(count, dtype=np.int64)
    for i in range(count):
        label = int(rng.integers(0, 2))
        cy = side / 2 - 0.5 + rng.uniform(-1.5, 1.5)
        cx = side / 2 - 0.5 + rng.uniform(-1.5, 1.5)
        dist = np.hypot(yy - cy, xx - cx)
        if label == 0:
            radius = rng.uniform(3.5, 5.0)
            img = np.clip(radius - dist + 0.5, 0.0, 1.0)
        else:
            outer = rng.uniform(4.0, 5.5)
            inner = outer - rng.uniform(1.4, 2.0)
            img = np.clip(0.5 + np.minimum(dist - inner, outer - dist), 0.0, 1.0)
        img = np.clip(img + rng.normal(0.0, 0.1, img.shape), 0.0, 1.0)
        images[i] = img
        labels[i] = label
    return Dataset(images=images, labels=labels, split=split, num_classes=2)
