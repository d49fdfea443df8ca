"""Dataset generation, Dirichlet partitioning, loader, and file-format checks."""

from __future__ import annotations

import struct

import numpy as np
import pytest

from ftte.data import (
    DatasetFormatError,
    InfeasiblePartitionError,
    LabeledDataset,
    Partition,
    PartitionSpec,
    class_directions,
    client_loader,
    dirichlet_partition,
    label_distribution,
    load_dataset_file,
    make_blobs,
    save_dataset_file,
    split_dataset,
    tv_distance,
)
from ftte.nn import ModelSpec, init_params, loss_and_grad, sgd_step, evaluate
from ftte.rng import make_rng


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _train_centralized(dataset, layer_dims, steps, lr, seed):
    params = init_params(ModelSpec(layer_dims=layer_dims, init_seed=seed))
    for step in range(steps):
        order = make_rng(seed + step + 1).permutation(len(dataset))
        for batch in dataset.subset(order).iter_batches(64):
            loss, grads = loss_and_grad(params, batch)
            params = sgd_step(params, grads, lr)
    return params


def test_blob_centers_are_unit_norm_and_deterministic():
    d1 = class_directions(4, 9, seed=5)
    d2 = class_directions(4, 9, seed=5)
    assert np.array_equal(d1, d2)
    assert np.allclose(np.linalg.norm(d1, axis=1), 1.0, atol=1e-12)
    assert not np.array_equal(d1, class_directions(4, 9, seed=6))


def test_make_blobs_deterministic_and_typed():
    a = make_blobs(3, 6, 20, 4.0, 1.0, seed=2)
    b = make_blobs(3, 6, 20, 4.0, 1.0, seed=2)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.labels, b.labels)
    assert a.inputs.dtype == np.float32
    assert len(a) == 60
    assert np.array_equal(np.bincount(a.labels), [20, 20, 20])


def test_noiseless_blobs_sit_on_centers_and_separate_linearly():
    data = make_blobs(3, 5, 30, 4.0, 0.0, seed=11)
    centers = class_directions(3, 5, seed=11) * 4.0
    assert np.allclose(data.inputs, centers[data.labels].astype(np.float32))
    params = _train_centralized(data, (5, 3), steps=40, lr=0.5, seed=1)
    accuracy, _ = evaluate(params, data.iter_batches(64))
    assert accuracy == 1.0


def test_zero_separation_stays_at_chance():
    data = make_blobs(2, 10, 1000, 0.0, 1.0, seed=3)
    train, test, _ = split_dataset(data, 0.25, 0.05, seed=3)
    params = _train_centralized(train, (10, 2), steps=10, lr=0.1, seed=1)
    accuracy, _ = evaluate(params, test.iter_batches(128))
    assert abs(accuracy - 0.5) < 0.1


def test_default_geometry_is_learnable():
    # separation 4, sigma 1, dim 20: a small MLP must clear 0.95 held-out
    data = make_blobs(2, 20, 1000, 4.0, 1.0, seed=9)
    train, test, _ = split_dataset(data, 0.2, 0.05, seed=9)
    params = _train_centralized(train, (20, 16, 2), steps=5, lr=0.2, seed=4)
    accuracy, _ = evaluate(params, test.iter_batches(128))
    assert accuracy >= 0.95


def test_split_dataset_disjoint_and_sized():
    data = make_blobs(2, 4, 100, 4.0, 1.0, seed=1)
    train, test, calib = split_dataset(data, 0.2, 0.1, seed=7)
    assert len(test) == 40 and len(calib) == 20 and len(train) == 140
    stacked = np.vstack([train.inputs, test.inputs, calib.inputs])
    assert stacked.shape == data.inputs.shape
    # no sample appears twice
    unique = np.unique(stacked, axis=0)
    assert unique.shape[0] == stacked.shape[0]
    with pytest.raises(ValueError):
        split_dataset(data, 0.9, 0.2, seed=1)


def test_partition_single_client_owns_everything():
    data = make_blobs(2, 4, 20, 4.0, 1.0, seed=1)
    part = dirichlet_partition(data, PartitionSpec(1, 1.0, seed=0))
    assert part.num_clients == 1
    assert sorted(part.assignments[0].tolist()) == list(range(len(data)))


def test_partition_infeasible_spec_raises():
    data = make_blobs(2, 4, 10, 4.0, 1.0, seed=1)
    with pytest.raises(InfeasiblePartitionError):
        dirichlet_partition(data, PartitionSpec(5, 1.0, seed=0, min_samples_per_client=8))


def test_partition_disjoint_coverage_and_floor_over_random_specs():
    rng = make_rng(2024)
    for _ in range(100):
        num_classes = int(rng.integers(2, 6))
        per_class = int(rng.integers(30, 80))
        data = make_blobs(num_classes, 3, per_class, 3.0, 1.0, seed=int(rng.integers(1 << 30)))
        num_clients = int(rng.integers(1, 9))
        alpha = float(10.0 ** rng.uniform(-1.5, 3.0))
        spec = PartitionSpec(num_clients, alpha, seed=int(rng.integers(1 << 30)))
        part = dirichlet_partition(data, spec)
        merged = np.concatenate(part.assignments)
        assert len(merged) == len(data)
        assert len(np.unique(merged)) == len(data)
        assert min(part.sizes()) >= spec.min_samples_per_client


def test_partition_deterministic_by_seed():
    data = make_blobs(3, 4, 50, 4.0, 1.0, seed=5)
    p1 = dirichlet_partition(data, PartitionSpec(6, 0.5, seed=9))
    p2 = dirichlet_partition(data, PartitionSpec(6, 0.5, seed=9))
    p3 = dirichlet_partition(data, PartitionSpec(6, 0.5, seed=10))
    assert all(np.array_equal(a, b) for a, b in zip(p1.assignments, p2.assignments))
    assert any(not np.array_equal(a, b) for a, b in zip(p1.assignments, p3.assignments))


def _mean_client_tv(data, alphas, seeds, num_clients):
    global_dist = label_distribution(data, np.arange(len(data)))
    means = []
    for alpha in alphas:
        distances = []
        for seed in seeds:
            part = dirichlet_partition(data, PartitionSpec(num_clients, alpha, seed=seed))
            for shard in part.assignments:
                distances.append(tv_distance(label_distribution(data, shard), global_dist))
        means.append(float(np.mean(distances)))
    return means


def test_huge_alpha_forces_uniform_shards():
    # shards need to be large enough that multinomial noise stays inside
    # the 0.05 budget once the Dirichlet draw is pinned near uniform
    data = make_blobs(2, 4, 10000, 4.0, 1.0, seed=1)
    global_dist = label_distribution(data, np.arange(len(data)))
    for seed in range(5):
        part = dirichlet_partition(data, PartitionSpec(10, 100000.0, seed=seed))
        for shard in part.assignments:
            assert tv_distance(label_distribution(data, shard), global_dist) <= 0.05


def test_low_alpha_collapses_per_client_entropy():
    data = make_blobs(10, 4, 200, 3.0, 1.0, seed=2)
    global_entropy = _entropy(label_distribution(data, np.arange(len(data))))
    medians = []
    for seed in range(5):
        part = dirichlet_partition(data, PartitionSpec(10, 0.1, seed=seed))
        entropies = [
            _entropy(label_distribution(data, shard)) for shard in part.assignments
        ]
        medians.append(float(np.median(entropies)))
    measured = float(np.median(medians))
    print(f"median per-client entropy {measured:.3f} vs global {global_entropy:.3f}")
    assert measured < 0.6 * global_entropy


def test_heterogeneity_decreases_with_alpha():
    data = make_blobs(2, 4, 1000, 4.0, 1.0, seed=7)
    tv_01, tv_1, tv_big = _mean_client_tv(data, [0.1, 1.0, 100000.0], range(5), 10)
    assert tv_01 > tv_1 > tv_big


def test_client_loader_batch_sizes_and_determinism():
    data = make_blobs(2, 4, 50, 4.0, 1.0, seed=1)
    shard = np.arange(10, dtype=np.int64)
    part = Partition([shard, np.arange(10, len(data), dtype=np.int64)])
    sizes = [b.size for b in client_loader(data, part, 0, 8, epoch_seed=4)]
    assert sizes == [8, 2]
    first = [b.inputs.copy() for b in client_loader(data, part, 0, 8, epoch_seed=4)]
    second = [b.inputs.copy() for b in client_loader(data, part, 0, 8, epoch_seed=4)]
    assert all(np.array_equal(a, b) for a, b in zip(first, second))
    third = [b.inputs.copy() for b in client_loader(data, part, 0, 8, epoch_seed=5)]
    assert any(not np.array_equal(a, b) for a, b in zip(first, third))


def test_client_loader_conserves_shard_labels():
    data = make_blobs(3, 4, 40, 4.0, 1.0, seed=6)
    part = dirichlet_partition(data, PartitionSpec(4, 0.5, seed=3))
    for cid in range(4):
        seen = np.concatenate([b.labels for b in client_loader(data, part, cid, 8, 77)])
        expected = data.labels[part.shard(cid)]
        assert sorted(seen.tolist()) == sorted(expected.tolist())
    with pytest.raises(KeyError):
        list(client_loader(data, part, 9, 8, 0))


def test_dataset_file_round_trip_and_golden_bytes(tmp_path):
    dataset = LabeledDataset(
        np.array([[1.5, -2.0], [0.25, 3.0]], dtype=np.float32),
        np.array([0, 1], dtype=np.int64),
        num_classes=2,
    )
    path = tmp_path / "tiny.ftds"
    save_dataset_file(dataset, path)
    expected = (
        b"FTDS"
        + struct.pack("<III", 2, 2, 2)
        + struct.pack("<4f", 1.5, -2.0, 0.25, 3.0)
        + struct.pack("<2H", 0, 1)
    )
    assert path.read_bytes() == expected
    loaded = load_dataset_file(path)
    assert np.array_equal(loaded.inputs, dataset.inputs)
    assert np.array_equal(loaded.labels, dataset.labels)
    assert loaded.num_classes == 2


def test_dataset_file_rejects_corruption(tmp_path):
    dataset = LabeledDataset(
        np.zeros((3, 2), dtype=np.float32),
        np.array([0, 1, 0], dtype=np.int64),
        num_classes=2,
    )
    path = tmp_path / "broken.ftds"
    save_dataset_file(dataset, path)
    raw = path.read_bytes()
    (tmp_path / "short.ftds").write_bytes(raw[:-2])
    with pytest.raises(DatasetFormatError):
        load_dataset_file(tmp_path / "short.ftds")
    (tmp_path / "magic.ftds").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError):
        load_dataset_file(tmp_path / "magic.ftds")
