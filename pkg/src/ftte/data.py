"""Synthetic datasets, non-IID client partitioning, and batch loading.

Datasets are Gaussian blobs: each class sits at a deterministic unit-norm
direction scaled by a separation factor, with isotropic noise on top. The
partitioner draws one Dirichlet proportion vector per class over clients
and assigns that class's samples multinomially, then moves samples away
from the largest clients until every client can form at least one batch.

An optional binary file format lets small real datasets be substituted:
header magic "FTDS", u32 n, u32 dim, u32 num_classes (little-endian),
then n*dim float32 little-endian features, then n u16 labels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Batch
from .rng import derive_seed, make_rng

FTDS_MAGIC = b"FTDS"


class InfeasiblePartitionError(ValueError):
    """The dataset cannot give every client its minimum shard size."""


class DatasetFormatError(ValueError):
    """A dataset file does not follow the documented binary layout."""


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # float32 [n, d]
    labels: np.ndarray  # int64 [n]
    num_classes: int

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError(f"inputs must be [n >= 1, d], got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must be one index per sample")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes)

    def iter_batches(self, batch_size: int):
        """Unshuffled batches in storage order; the tail batch may be short."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for start in range(0, len(self), batch_size):
            stop = min(start + batch_size, len(self))
            yield Batch(self.inputs[start:stop], self.labels[start:stop])


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    seed: int
    min_samples_per_client: int = 8

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.min_samples_per_client < 1:
            raise ValueError("min_samples_per_client must be >= 1")


@dataclass
class Partition:
    assignments: list[np.ndarray]  # int64 index arrays, one per client

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def shard(self, client_id: int) -> np.ndarray:
        if not 0 <= client_id < self.num_clients:
            raise KeyError(f"unknown client id {client_id}")
        return self.assignments[client_id]

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]


def class_directions(num_classes: int, dim: int, seed: int) -> np.ndarray:
    """Unit-norm center directions, one row per class, fixed by the seed."""
    rng = make_rng(derive_seed(seed, "centers"))
    directions = rng.normal(0.0, 1.0, size=(num_classes, dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("degenerate zero-norm center draw")
    return directions / norms


def make_blobs(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    class_separation: float,
    noise_sigma: float,
    seed: int,
) -> LabeledDataset:
    """Isotropic Gaussian blobs with equal class counts, float32 storage."""
    if num_classes < 1 or dim < 1 or samples_per_class < 1:
        raise ValueError("num_classes, dim, and samples_per_class must be >= 1")
    if class_separation < 0:
        raise ValueError("class_separation must be >= 0")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    centers = class_directions(num_classes, dim, seed) * class_separation
    rng = make_rng(derive_seed(seed, "noise"))
    n = num_classes * samples_per_class
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), samples_per_class)
    noise = rng.normal(0.0, 1.0, size=(n, dim)) * noise_sigma
    inputs = (centers[labels] + noise).astype(np.float32)
    # interleave classes so contiguous splits stay label-balanced
    order = make_rng(derive_seed(seed, "order")).permutation(n)
    return LabeledDataset(inputs[order], labels[order], num_classes)


def split_dataset(
    dataset: LabeledDataset,
    test_fraction: float,
    calibration_fraction: float,
    seed: int,
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Disjoint (train, test, calibration) split by a seeded permutation."""
    if test_fraction < 0 or calibration_fraction < 0:
        raise ValueError("split fractions must be >= 0")
    if test_fraction + calibration_fraction >= 1.0:
        raise ValueError("train split would be empty")
    n = len(dataset)
    order = make_rng(derive_seed(seed, "split")).permutation(n)
    n_test = int(round(n * test_fraction))
    n_calib = int(round(n * calibration_fraction))
    if n_test < 1 or n_calib < 1:
        raise ValueError("test and calibration splits must be non-empty")
    test = dataset.subset(order[:n_test])
    calib = dataset.subset(order[n_test : n_test + n_calib])
    train = dataset.subset(order[n_test + n_calib :])
    return train, test, calib


def dirichlet_partition(dataset: LabeledDataset, spec: PartitionSpec) -> Partition:
    """Per-class Dirichlet assignment over clients, then minimal rebalancing.

    For each class in index order: shuffle its samples, draw client
    proportions from Dirichlet(alpha * 1), and split the class multinomially.
    Rebalancing repeatedly moves one sample from the currently largest
    client (ties toward the lowest id) to the most starved client until
    every client holds at least ``min_samples_per_client``.
    """
    k = spec.num_clients
    if len(dataset) < k * spec.min_samples_per_client:
        raise InfeasiblePartitionError(
            f"{len(dataset)} samples cannot give {k} clients "
            f"{spec.min_samples_per_client} each"
        )
    rng = make_rng(spec.seed)
    assignments: list[list[int]] = [[] for _ in range(k)]
    for c in range(dataset.num_classes):
        class_idx = np.flatnonzero(dataset.labels == c)
        class_idx = class_idx[rng.permutation(len(class_idx))]
        proportions = rng.dirichlet(np.full(k, spec.alpha, dtype=np.float64))
        counts = rng.multinomial(len(class_idx), proportions)
        start = 0
        for client, count in enumerate(counts):
            assignments[client].extend(int(i) for i in class_idx[start : start + count])
            start += count

    while True:
        sizes = [len(a) for a in assignments]
        needy = min(range(k), key=lambda i: (sizes[i], i))
        if sizes[needy] >= spec.min_samples_per_client:
            break
        donor = max(range(k), key=lambda i: (sizes[i], -i))
        assignments[needy].append(assignments[donor].pop())

    return Partition([np.array(a, dtype=np.int64) for a in assignments])


def client_loader(
    dataset: LabeledDataset,
    partition: Partition,
    client_id: int,
    batch_size: int,
    epoch_seed: int,
):
    """One epoch of shuffled mini-batches over a client's shard.

    The shard order is a Philox permutation of ``epoch_seed``; the final
    partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    shard = partition.shard(client_id)
    order = make_rng(epoch_seed).permutation(len(shard))
    shuffled = shard[order]
    for start in range(0, len(shuffled), batch_size):
        idx = shuffled[start : start + batch_size]
        yield Batch(dataset.inputs[idx], dataset.labels[idx])


def label_distribution(dataset: LabeledDataset, indices: np.ndarray) -> np.ndarray:
    """Class proportions over the given sample indices."""
    counts = np.bincount(dataset.labels[indices], minlength=dataset.num_classes)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty index set has no label distribution")
    return counts / total


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Total-variation distance between two distributions on the same support."""
    if p.shape != q.shape:
        raise ValueError("distributions must share a support")
    return float(0.5 * np.abs(p - q).sum())


def save_dataset_file(dataset: LabeledDataset, path: str | Path) -> None:
    """Write the documented little-endian binary layout."""
    if dataset.num_classes > 0xFFFF:
        raise DatasetFormatError("u16 labels cap num_classes at 65536")
    n, dim = dataset.inputs.shape
    with open(path, "wb") as fh:
        fh.write(FTDS_MAGIC)
        fh.write(struct.pack("<III", n, dim, dataset.num_classes))
        fh.write(np.ascontiguousarray(dataset.inputs, dtype="<f4").tobytes())
        fh.write(dataset.labels.astype("<u2").tobytes())


def load_dataset_file(path: str | Path) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FTDS_MAGIC:
        raise DatasetFormatError("missing FTDS header")
    n, dim, num_classes = struct.unpack("<III", raw[4:16])
    expect = 16 + n * dim * 4 + n * 2
    if len(raw) != expect:
        raise DatasetFormatError(f"file is {len(raw)} bytes, layout needs {expect}")
    inputs = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=16).reshape(n, dim)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=16 + n * dim * 4)
    return LabeledDataset(
        inputs.astype(np.float32), labels.astype(np.int64), num_classes
    )
