"""Datasets and deterministic batching.

Two sources are supported: IDX files (the MNIST container format,
optionally gzip-compressed) and synthetic Gaussian-cluster
classification problems.  Shuffling is driven by numpy's PCG64
generator seeded per epoch with base_seed + epoch_index, so a (seed,
epoch) pair pins the whole batch sequence for a given numpy build.
Bit-equality across different builds is not promised.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "IdxFormatError",
    "Dataset",
    "load_idx",
    "write_idx_images",
    "write_idx_labels",
    "synthetic_classification",
    "BatchPlan",
    "make_batch_plan",
    "batches",
    "split",
]

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801

# Any header whose element count exceeds this is treated as corrupt.
_MAX_IDX_ELEMENTS = 1 << 40


class IdxFormatError(ValueError):
    """Malformed IDX content: bad magic, corrupt dims, or short payload."""


@dataclass
class Dataset:
    """Feature matrix (features x samples) plus targets.

    Classification targets are a 1-D integer vector of class indices;
    regression targets are a (outputs x samples) float matrix.
    """

    inputs: np.ndarray
    targets: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if not np.isfinite(self.inputs).all():
            raise ValueError("inputs must be finite")
        n = self.inputs.shape[1]
        t = self.targets
        if t.ndim == 1:
            if t.shape[0] != n:
                raise ValueError(f"{t.shape[0]} targets for {n} samples")
            if self.num_classes is not None and t.size:
                if int(t.min()) < 0 or int(t.max()) >= self.num_classes:
                    raise ValueError(
                        f"class index out of range: saw {int(t.max())} "
                        f"with {self.num_classes} classes"
                    )
        elif t.ndim == 2:
            if t.shape[1] != n:
                raise ValueError(f"{t.shape[1]} target columns for {n} samples")
            if not np.isfinite(t).all():
                raise ValueError("targets must be finite")
        else:
            raise ValueError(f"targets must be 1-D or 2-D, got shape {t.shape}")

    @property
    def n(self) -> int:
        return self.inputs.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.inputs.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.targets.ndim == 1


def load_idx(path) -> np.ndarray:
    """Read one IDX file.

    Images (magic 0x00000803) come back as a (rows*cols, n) float64
    matrix scaled to [0, 1]; labels (magic 0x00000801) as a 1-D int64
    vector.  Gzip payloads are detected by their two-byte prefix.
    """
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated IDX header")
    magic = int.from_bytes(raw[:4], "big")
    if magic == IDX_MAGIC_LABELS:
        ndim = 1
    elif magic == IDX_MAGIC_IMAGES:
        ndim = 3
    else:
        raise IdxFormatError(f"{path}: unsupported IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_IDX_ELEMENTS:
        raise IdxFormatError(f"{path}: IDX dimensions overflow: {dims}")
    payload = raw[header:]
    if len(payload) < count:
        raise IdxFormatError(
            f"{path}: truncated IDX payload: header promises {count} bytes, "
            f"file holds {len(payload)}"
        )
    data = np.frombuffer(payload[:count], dtype=np.uint8)
    if magic == IDX_MAGIC_LABELS:
        return data.astype(np.int64)
    n, rows, cols = dims
    return data.reshape(n, rows * cols).T.astype(np.float64) / 255.0


def _write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        # mtime pinned so repeated writes byte-match
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write a (n, rows, cols) uint8 array as an IDX image file."""
    arr = np.ascontiguousarray(images, dtype=np.uint8)
    if arr.ndim != 3:
        raise ValueError(f"images must be (n, rows, cols), got shape {arr.shape}")
    header = struct.pack(">IIII", IDX_MAGIC_IMAGES, *arr.shape)
    _write_bytes(path, header + arr.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    """Write a 1-D array of small non-negative ints as an IDX label file."""
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {arr.shape}")
    header = struct.pack(">II", IDX_MAGIC_LABELS, arr.shape[0])
    _write_bytes(path, header + arr.astype(np.uint8).tobytes())


def synthetic_classification(n: int, d: int, k: int, seed: int) -> Dataset:
    """Gaussian clusters around k unit-norm random means, fully seeded.

    The cluster spread sigma is capped at a quarter of the smallest
    pairwise mean distance (so the means sit at least 4 sigma apart and
    the classes stay linearly separable), and class counts are balanced
    to within one sample.  Column order is shuffled.
    """
    if k < 2:
        raise ValueError(f"need at least 2 classes, got {k}")
    if n < k:
        raise ValueError(f"need at least one sample per class: n={n}, k={k}")
    if d < 1:
        raise ValueError(f"need at least one feature, got {d}")
    rng = np.random.Generator(np.random.PCG64(seed))
    means = rng.standard_normal((k, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
    min_gap = float(gaps[~np.eye(k, dtype=bool)].min())
    if min_gap <= 0.0:
        raise ValueError(f"degenerate cluster means for seed {seed}")
    sigma = min(0.2, min_gap / 4.0)

    counts = [n // k + (1 if c < n % k else 0) for c in range(k)]
    inputs = np.empty((d, n))
    targets = np.empty(n, dtype=np.int64)
    pos = 0
    for c, cnt in enumerate(counts):
        inputs[:, pos : pos + cnt] = means[c][:, None] + sigma * rng.standard_normal((d, cnt))
        targets[pos : pos + cnt] = c
        pos += cnt
    perm = rng.permutation(n)
    return Dataset(inputs[:, perm], targets[perm], num_classes=k)


@dataclass(frozen=True)
class BatchPlan:
    """One epoch's shuffled sample order, cut into fixed-size batches.

    The trailing partial batch is always dropped so every batch has
    exactly batch_size samples.
    """

    epoch_seed: int
    batch_size: int
    order: np.ndarray
    drop_last: bool = True

    def batches(self):
        full = self.order.shape[0] // self.batch_size
        for b in range(full):
            yield self.order[b * self.batch_size : (b + 1) * self.batch_size]


def make_batch_plan(n: int, batch_size: int, epoch_seed: int) -> BatchPlan:
    if batch_size < 1:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
    rng = np.random.Generator(np.random.PCG64(epoch_seed))
    return BatchPlan(epoch_seed, batch_size, rng.permutation(n))


def batches(n: int, batch_size: int, epoch_seed: int) -> list[np.ndarray]:
    """Index arrays for one epoch; trailing partial batch dropped."""
    return list(make_batch_plan(n, batch_size, epoch_seed).batches())


def split(ds: Dataset, n_first: int) -> tuple[Dataset, Dataset]:
    """Cut a dataset into its first n_first columns and the rest."""
    if not 0 < n_first < ds.n:
        raise ValueError(f"split point {n_first} outside (0, {ds.n})")
    t = ds.targets
    first = Dataset(ds.inputs[:, :n_first], t[..., :n_first], ds.num_classes)
    rest = Dataset(ds.inputs[:, n_first:], t[..., n_first:], ds.num_classes)
    return first, rest
