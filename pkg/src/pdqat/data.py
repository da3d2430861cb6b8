"""Datasets: IDX/CSV loaders, synthetic generators, batching."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .errors import FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    label_names: Optional[List[str]] = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) < 1:
            raise InputError("dataset must contain at least one sample")
        if len(self.x) != len(self.y):
            raise InputError(f"{len(self.x)} feature rows but {len(self.y)} labels")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self):
        return tuple(self.x.shape[1:])

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.mean,
                       self.scale, self.label_names)

    def astype(self, dtype):
        return Dataset(self.x.astype(dtype), self.y, self.num_classes, self.mean,
                       self.scale, self.label_names)

    def fit_normalization(self):
        """Standardize features in place; returns ``(mean, scale)``."""
        mean = self.x.mean(axis=0)
        scale = self.x.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        self.x = ((self.x - mean) / scale).astype(self.x.dtype)
        self.mean, self.scale = mean, scale
        return mean, scale

    def apply_normalization(self, mean, scale):
        """Standardize with statistics fitted on another (training) split."""
        self.x = ((self.x - mean) / scale).astype(self.x.dtype)
        self.mean, self.scale = mean, scale
        return self


def split(dataset: Dataset, fraction, seed=0) -> Tuple[Dataset, Dataset]:
    """Random ``(1 - fraction, fraction)`` split."""
    n = len(dataset)
    n_b = int(round(n * fraction))
    if not 0 < n_b < n:
        raise InputError(f"split fraction {fraction} leaves an empty part of {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[n_b:])), dataset.subset(np.sort(perm[:n_b]))


def batch_iter(dataset, batch_size, seed=None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x, y)`` minibatches, ``ceil(N / batch_size)`` of them.

    ``seed=None`` keeps the stored order; otherwise a seeded permutation.
    The last batch may be smaller.
    """
    if batch_size < 1:
        raise InputError("batch size must be >= 1")
    x, y = (dataset.x, dataset.y) if isinstance(dataset, Dataset) else dataset
    n = len(y)
    order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        yield x[idx], y[idx]


def num_batches(n, batch_size):
    return math.ceil(n / batch_size)


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------

def blob_centers(classes, dim=2):
    """Class centers on the unit circle in the first two coordinates."""
    ang = 2 * np.pi * np.arange(classes) / classes
    c = np.zeros((classes, dim))
    c[:, 0] = np.cos(ang)
    if dim > 1:
        c[:, 1] = np.sin(ang)
    return c


def gen_synthetic(kind="blobs", n_per_class=100, classes=2, noise=0.5, seed=0,
                  dim=2, dtype=np.float32) -> Dataset:
    """Seeded toy classification data.

    blobs
        isotropic Gaussians with std ``noise`` around :func:`blob_centers`.
        Two classes sit at distance 2, so ``noise=0.5`` separates them by
        four standard deviations.
    spirals
        interleaved arcs, radius growing with angle, with radial noise.
    """
    if n_per_class < 1:
        raise InputError("n_per_class must be >= 1")
    if classes < 2:
        raise InputError("need at least two classes")
    if dim < 2:
        raise InputError("synthetic data needs dim >= 2")
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(classes), n_per_class)
    n = len(y)
    if kind == "blobs":
        x = blob_centers(classes, dim)[y] + noise * rng.standard_normal((n, dim))
    elif kind == "spirals":
        t = rng.uniform(0.05, 1.0, n)
        r = t + noise * rng.standard_normal(n)
        theta = 3 * np.pi * t + 2 * np.pi * y / classes
        x = np.zeros((n, dim))
        x[:, 0] = r * np.cos(theta)
        x[:, 1] = r * np.sin(theta)
        if dim > 2:
            x[:, 2:] = noise * rng.standard_normal((n, dim - 2))
    else:
        raise InputError(f"unknown synthetic kind {kind!r}")
    perm = rng.permutation(n)
    return Dataset(x[perm].astype(dtype), y[perm], classes)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_header(buf, magic, ndims, path):
    need = 4 * (1 + ndims)
    if len(buf) < need:
        raise FormatError(f"{path}: truncated IDX header", offset=len(buf))
    got = struct.unpack_from(">I", buf, 0)[0]
    if got != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    return struct.unpack_from(f">{ndims}I", buf, 4), need


def load_idx(images_path, labels_path, num_classes=None, dtype=np.float32) -> Dataset:
    """Read a big-endian IDX image/label pair; pixels are scaled to [0, 1].

    Features have shape ``N x 1 x rows x cols``.
    """
    ib = Path(images_path).read_bytes()
    lb = Path(labels_path).read_bytes()
    (n, rows, cols), off = _read_header(ib, IDX_IMAGES_MAGIC, 3, images_path)
    if n == 0:
        raise InputError(f"{images_path}: IDX file holds zero images")
    size = n * rows * cols
    if len(ib) < off + size:
        raise FormatError(f"{images_path}: truncated pixel data, expected {off + size} bytes",
                          offset=len(ib))
    (nl,), loff = _read_header(lb, IDX_LABELS_MAGIC, 1, labels_path)
    if nl != n:
        raise FormatError(f"{labels_path}: {nl} labels for {n} images", offset=4)
    if len(lb) < loff + n:
        raise FormatError(f"{labels_path}: truncated label data", offset=len(lb))
    pix = np.frombuffer(ib, dtype=np.uint8, count=size, offset=off)
    x = (pix.astype(np.float64) / 255.0).astype(dtype).reshape(n, 1, rows, cols)
    y = np.frombuffer(lb, dtype=np.uint8, count=n, offset=loff).astype(np.int64)
    k = int(y.max()) + 1 if num_classes is None else num_classes
    return Dataset(x, y, k)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``N x rows x cols`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(
        struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, n) + labels.tobytes())


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def load_csv(path, label_column, label_names=None, dtype=np.float32) -> Dataset:
    """Numeric CSV with a header row.

    Labels are mapped to ``0..K-1`` in order of first appearance, unless
    ``label_names`` (e.g. the training split's mapping) is given.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty CSV file") from None
        if label_column not in header:
            raise InputError(f"{path}: no column named {label_column!r}")
        li = header.index(label_column)
        names = list(label_names) if label_names else []
        fixed = bool(label_names)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: expected {len(header)} fields, got {len(row)}",
                                  offset=f"line {lineno}")
            try:
                rows.append([float(v) for j, v in enumerate(row) if j != li])
            except ValueError:
                raise FormatError(f"{path}: non-numeric feature", offset=f"line {lineno}") from None
            lab = row[li].strip()
            if lab not in names:
                if fixed:
                    raise FormatError(f"{path}: unknown label {lab!r}", offset=f"line {lineno}")
                names.append(lab)
            labels.append(names.index(lab))
    if not rows:
        raise InputError(f"{path}: no data rows")
    return Dataset(np.asarray(rows, dtype=dtype), np.asarray(labels), len(names),
                   label_names=names)
