"""Datasets: deterministic synthetic tasks and an IDX reader.

The synthetic generators stand in for image benchmarks at desk scale;
all of them are pure functions of (kind, n, d, seed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_MAX_ELEMENTS = 1 << 33  # refuse absurd dimension products


@dataclass
class Dataset:
    """Inputs plus integer labels or real targets.

    x : [n, d] float64, finite.
    y : [n] int64 class labels (with n_classes set) or float64 targets.
    split : per-example tag array ("train"/"test"), defaults to train.
    """

    x: np.ndarray
    y: np.ndarray
    n_classes: int = None
    split: np.ndarray = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if not np.all(np.isfinite(self.x)):
            raise ValueError("inputs contain NaN or Inf")
        if self.n_classes is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
                raise ValueError("labels out of range")
        else:
            self.y = np.asarray(self.y, dtype=np.float64)
            if not np.all(np.isfinite(self.y)):
                raise ValueError("targets contain NaN or Inf")
        if len(self.y) != len(self.x):
            raise ValueError("inputs and targets disagree on length")
        if self.split is None:
            self.split = np.full(len(self.x), "train")

    def __len__(self):
        return len(self.x)


def make_synthetic(kind, n, d, seed, classes=2, noise=0.1, separation=3.0, offset=0.0):
    """Deterministic synthetic task.

    blobs      : `classes` Gaussian clusters with unit-ball centers scaled
                 by `separation`, per-coordinate std `noise`; `offset`
                 shifts every coordinate (un-centered features).
    xor        : 2-D xor pattern on the first two coordinates (labels set
                 before jitter), remaining coordinates pure noise.
    regression : targets X w_true + noise * eps, w_true fixed by the seed.
    """
    if n <= 0 or d <= 0:
        raise ValueError("n and d must be positive")
    k = rng.key(seed)
    if kind == "blobs":
        centers = rng.sample_gaussian(rng.split(k, 0), (classes, d))
        centers *= separation / np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), 1e-12)
        labels = np.arange(n) % classes
        x = offset + centers[labels] + noise * rng.sample_gaussian(rng.split(k, 1), (n, d))
        return Dataset(x, labels, n_classes=classes)
    if kind == "xor":
        base = rng.sample_uniform(rng.split(k, 0), (n, max(d, 2))) * 2.0 - 1.0
        labels = ((base[:, 0] > 0) ^ (base[:, 1] > 0)).astype(np.int64)
        x = base[:, :d] + noise * rng.sample_gaussian(rng.split(k, 1), (n, d))
        return Dataset(x, labels, n_classes=2)
    if kind == "regression":
        x = rng.sample_gaussian(rng.split(k, 0), (n, d))
        w_true = rng.sample_gaussian(rng.split(k, 1), (d, 1))
        y = x @ w_true + noise * rng.sample_gaussian(rng.split(k, 2), (n, 1))
        return Dataset(x, y)
    raise ValueError(f"unknown synthetic kind {kind!r}")


def _read_header(fh, expect_magic, what):
    raw = fh.read(4)
    if len(raw) < 4:
        raise ValueError(f"truncated {what} file: missing magic")
    (magic,) = struct.unpack(">I", raw)
    if magic != expect_magic:
        raise ValueError(f"wrong magic 0x{magic:08x} for {what} file "
                         f"(expected 0x{expect_magic:08x})")
    ndim = magic & 0xFF
    dims = []
    for _ in range(ndim):
        raw = fh.read(4)
        if len(raw) < 4:
            raise ValueError(f"truncated {what} file: missing dimensions")
        dims.append(struct.unpack(">I", raw)[0])
    count = 1
    for dim in dims:
        count *= dim
        if count > _MAX_ELEMENTS:
            raise ValueError(f"{what} dimensions overflow sane limits: {dims}")
    return dims, count


def load_idx(path_images, path_labels):
    """Parse an IDX image/label pair into a Dataset.

    Big-endian throughout: image magic 0x00000803 then (count, rows,
    cols) as 32-bit words, label magic 0x00000801 then (count,); pixel
    bytes are scaled to [0, 1].
    """
    with open(path_images, "rb") as fh:
        dims, count = _read_header(fh, IMAGE_MAGIC, "image")
        raw = fh.read(count)
        if len(raw) < count:
            raise ValueError("truncated image file: fewer pixels than declared")
        x = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
        x = x.reshape(dims[0], dims[1] * dims[2])
    with open(path_labels, "rb") as fh:
        ldims, lcount = _read_header(fh, LABEL_MAGIC, "label")
        raw = fh.read(lcount)
        if len(raw) < lcount:
            raise ValueError("truncated label file: fewer labels than declared")
        y = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if ldims[0] != dims[0]:
        raise ValueError("image and label counts disagree")
    return Dataset(x, y, n_classes=int(y.max()) + 1 if y.size else 1)


def sample_batch(data, batch_size, k, replace=True):
    """Draw a batch by key; iid with replacement unless told otherwise."""
    n = len(data)
    g = rng.generator(k)
    if replace:
        idx = g.integers(0, n, size=batch_size)
    else:
        if batch_size > n:
            raise ValueError("batch size exceeds dataset size (and replace=False)")
        idx = g.permutation(n)[:batch_size]
    return data.x[idx], data.y[idx]
