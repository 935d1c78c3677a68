"""Dataset ingestion (IDX format), synthetic generation, IID partitioning, batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import rng
from .models import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Malformed dataset files or invalid partition/batch parameters."""


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise DataError("inputs must be a nonempty N x d matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DataError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError("labels out of range for declared class count")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class PartitionPlan:
    num_clients: int
    shard_indices: tuple[np.ndarray, ...]


def _open_maybe_gz(path: str | Path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise DataError(f"truncated IDX file while reading {what}")
    return data


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Parse an IDX image/label pair; pixels come out scaled to [0, 1]."""
    with _open_maybe_gz(images_path) as f:
        magic, count = struct.unpack(">II", _read_exact(f, 8, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise DataError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        rows, cols = struct.unpack(">II", _read_exact(f, 8, "image dims"))
        raw = _read_exact(f, count * rows * cols, "pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with _open_maybe_gz(labels_path) as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise DataError(f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(f, label_count, "label data"), dtype=np.uint8)
    if label_count != count:
        raise DataError(f"{count} images but {label_count} labels")
    num_classes = int(labels.max()) + 1
    return Dataset(inputs=images / 255.0, labels=labels.astype(np.int64), num_classes=num_classes)


def save_idx(
    ds: Dataset, images_path: str | Path, labels_path: str | Path, shape: tuple[int, int] | None = None
) -> None:
    """Write a dataset as an IDX pair (inverse of load_idx, for fixtures).

    Inputs must already lie in [0, 1]; they are quantized to uint8, so a
    write/read/write cycle is byte-stable.
    """
    if ds.inputs.min() < 0.0 or ds.inputs.max() > 1.0:
        raise DataError("IDX export requires inputs in [0, 1]")
    n, d = ds.inputs.shape
    if shape is None:
        shape = (1, d)
    rows, cols = shape
    if rows * cols != d:
        raise DataError(f"shape {shape} does not cover dimension {d}")
    pixels = np.rint(ds.inputs * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def synth_gaussian(
    classes: int, per_class: int, dim: int, separation: float, seed: int
) -> Dataset:
    """Gaussian blobs N(mu_c, I) with all pairwise ||mu_c - mu_c'|| = separation.

    Means sit on a scaled axis simplex, which needs dim >= classes when
    separation > 0.
    """
    if classes < 1 or per_class < 1 or dim < 1:
        raise DataError("classes, per_class and dim must be positive")
    if separation < 0:
        raise DataError("separation must be nonnegative")
    if separation > 0 and dim < classes:
        raise DataError(f"equal pairwise separation needs dim >= classes ({dim} < {classes})")
    gen = rng.generator(rng.derive_seed(seed, "synth-gaussian"))
    n = classes * per_class
    inputs = gen.standard_normal((n, dim))
    labels = np.repeat(np.arange(classes), per_class)
    scale = separation / np.sqrt(2.0)
    for c in range(classes):
        inputs[labels == c, c] += scale if separation > 0 else 0.0
    perm = gen.permutation(n)
    return Dataset(inputs=inputs[perm], labels=labels[perm], num_classes=classes)


def uniform_dataset(n: int, dim: int, classes: int, seed: int) -> Dataset:
    """Uniform-[0,1] inputs with teacher-model labels; the attack benchmark's data."""
    gen = rng.generator(rng.derive_seed(seed, "uniform-data"))
    inputs = gen.uniform(0.0, 1.0, size=(n, dim))
    teacher = gen.standard_normal((dim, classes))
    labels = (inputs @ teacher).argmax(axis=1)
    return Dataset(inputs=inputs, labels=labels, num_classes=classes)


def partition_iid(ds: Dataset, num_clients: int, seed: int) -> PartitionPlan:
    """Uniform shuffle split into near-equal disjoint shards (sizes differ by <= 1)."""
    if num_clients < 1:
        raise DataError("need at least one client")
    if num_clients > len(ds):
        raise DataError(f"cannot split {len(ds)} samples across {num_clients} clients")
    gen = rng.generator(rng.derive_seed(seed, "partition"))
    perm = gen.permutation(len(ds))
    shards = tuple(np.sort(part) for part in np.array_split(perm, num_clients))
    return PartitionPlan(num_clients=num_clients, shard_indices=shards)


def batches(
    ds: Dataset, shard: Sequence[int] | np.ndarray, batch_size: int, epoch_seed: int
) -> Iterator[Batch]:
    """One epoch of minibatches over a shard, reshuffled by epoch_seed."""
    shard = np.asarray(shard, dtype=np.int64)
    if shard.size == 0:
        raise DataError("empty shard")
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    gen = rng.generator(epoch_seed)
    order = shard[gen.permutation(shard.size)]
    for start in range(0, order.size, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(inputs=ds.inputs[idx], labels=ds.labels[idx])


def full_batch(ds: Dataset, shard: Sequence[int] | np.ndarray) -> Batch:
    shard = np.asarray(shard, dtype=np.int64)
    return Batch(inputs=ds.inputs[shard], labels=ds.labels[shard])
