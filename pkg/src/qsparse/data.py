"""IDX ingestion, synthetic datasets and worker sharding."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .objectives import Dataset

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

SHARD_MODES = ("contiguous", "round-robin", "iid-random", "by-label")


def _read(path, what):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {what} file {path}: {exc.strerror or exc}") from exc


def _header(buf, n_fields, magic, what):
    need = 4 * (1 + n_fields)
    if len(buf) < need:
        raise FormatError(f"{what}: truncated header ({len(buf)} bytes, need {need})")
    vals = struct.unpack(f">{1 + n_fields}I", buf[:need])
    if vals[0] != magic:
        raise FormatError(f"{what}: unexpected magic 0x{vals[0]:08x}, expected 0x{magic:08x}")
    return vals[1:], need


def read_idx_images(path):
    buf = _read(path, "images")
    (count, rows, cols), off = _header(buf, 3, IMAGES_MAGIC, "images")
    size = count * rows * cols
    if len(buf) - off < size:
        raise FormatError(f"images: truncated pixel data (count={count}, rows={rows}, cols={cols} "
                          f"needs {size} bytes, found {len(buf) - off})")
    px = np.frombuffer(buf, dtype=np.uint8, count=size, offset=off)
    return px.reshape(count, rows * cols), (rows, cols)


def read_idx_labels(path):
    buf = _read(path, "labels")
    (count,), off = _header(buf, 1, LABELS_MAGIC, "labels")
    if len(buf) - off < count:
        raise FormatError(f"labels: truncated label data (count={count}, found {len(buf) - off} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=off)


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    px, _ = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if px.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch: images count={px.shape[0]}, labels count={labels.shape[0]}")
    return Dataset(px.astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(dataset, images_path, labels_path, rows=1, cols=None):
    """Write features (assumed in [0, 1]) and labels in IDX format.

    Features are rounded to the nearest multiple of 1/255.
    """
    n, d = dataset.features.shape
    cols = d if cols is None else cols
    if rows * cols != d:
        raise ParameterError(f"rows*cols = {rows * cols} does not match feature width {d}")
    if dataset.labels.size and dataset.labels.max() > 255:
        raise DataError("labels above 255 do not fit the IDX label format")
    px = np.clip(np.rint(dataset.features * 255.0), 0, 255).astype(np.uint8)
    try:
        with open(images_path, "wb") as fh:
            fh.write(struct.pack(">4I", IMAGES_MAGIC, n, rows, cols))
            fh.write(px.tobytes())
        with open(labels_path, "wb") as fh:
            fh.write(struct.pack(">2I", LABELS_MAGIC, n))
            fh.write(dataset.labels.astype(np.uint8).tobytes())
    except OSError as exc:
        raise DataError(f"cannot write IDX file: {exc}") from exc


def to_unit_grid(dataset):
    """Min-max scale features to [0, 1] and snap them to the 8-bit grid."""
    f = dataset.features
    lo, hi = f.min(), f.max()
    span = hi - lo if hi > lo else 1.0
    f = np.rint((f - lo) / span * 255.0) / 255.0
    return Dataset(f, dataset.labels)


def synthetic_classification(n, d_in, L, margin, seed):
    """L Gaussian clusters with unit-variance noise.

    Class j has mean (margin / sqrt 2) e_j, so any two class means are
    ``margin`` apart. Requires L <= d_in. Labels cycle 0..L-1 before shuffling,
    so class sizes differ by at most one.
    """
    if not n >= L >= 2:
        raise ParameterError(f"need n >= L >= 2, got n={n}, L={L}")
    if L > d_in:
        raise ParameterError(f"need L <= d_in for orthogonal class means, got L={L}, d_in={d_in}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % L)
    means = np.zeros((L, d_in))
    means[np.arange(L), np.arange(L)] = margin / np.sqrt(2.0)
    feats = means[labels] + rng.standard_normal((n, d_in))
    return Dataset(feats, labels)


@dataclass(frozen=True)
class ShardPlan:
    assignment: tuple
    mode: str
    seed: int | None = None

    @property
    def R(self):
        return len(self.assignment)

    def sizes(self):
        return [len(a) for a in self.assignment]


def shard(dataset, R, mode="iid-random", seed=0):
    """Partition range(n) across R workers.

    ``by-label`` sorts by label (stable) then splits contiguously, giving the
    most heterogeneous shards.
    """
    n = dataset.n if isinstance(dataset, Dataset) else int(dataset)
    if R < 1:
        raise ParameterError(f"R must be >= 1, got {R}")
    if R > n:
        raise ParameterError(f"cannot shard {n} points over R={R} workers")
    if mode == "contiguous":
        order = np.arange(n)
    elif mode == "round-robin":
        return ShardPlan(tuple(np.arange(r, n, R) for r in range(R)), mode)
    elif mode == "iid-random":
        order = np.random.default_rng(seed).permutation(n)
    elif mode == "by-label":
        order = np.argsort(dataset.labels, kind="stable")
    else:
        raise ParameterError(f"unknown shard mode {mode!r}; expected one of {', '.join(SHARD_MODES)}")
    parts = tuple(np.array_split(order, R))
    return ShardPlan(parts, mode, seed if mode == "iid-random" else None)
