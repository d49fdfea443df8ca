"""Client training and the four server aggregation rules.

The buffered server collects sparse client deltas and, when the buffer
reaches capacity, combines them as a convex mixture: each update gets a
staleness score (age x variance for the main rule, age-only for the
FedBuff-style baseline), scores are normalized to sum 1, and the mixture
is added to the global model on the masked entries only. The synchronous
baseline weighs a full round of updates by sample counts; the fully
asynchronous baseline folds every update in immediately, scaled by a
mixing rate and an age penalty.

Mixture coefficients and the combined delta are accumulated in float64;
parameters themselves stay float32. Unmasked entries of the global model
are never written, so they stay bit-identical for the life of a run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ParamSet, loss_and_grad, sgd_step
from .rng import derive_seed
from .sparse import SparseDelta, SparseMask, extract_delta

STRATEGIES = ("ftte", "sync", "async", "fedbuff")
AGE_MODES = ("received_step", "version_lag")


class BufferNotFullError(RuntimeError):
    """Aggregation fired before the buffer reached capacity."""


class MissingClientError(ValueError):
    """A synchronous round is missing an expected client's update."""


class ClockRegressionError(ValueError):
    """An update claims to arrive before it was received."""


class EmptyShardError(ValueError):
    """A client has no data to train on."""


class MaskMismatchError(ValueError):
    """An update was produced under a different mask than the server's."""


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    delta: SparseDelta
    base_version: int
    received_step: int
    num_samples: int

    def __post_init__(self) -> None:
        if self.received_step < 0:
            raise ValueError("received_step must be >= 0")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


@dataclass
class ServerState:
    global_params: ParamSet
    mask: SparseMask
    strategy: str
    buffer_capacity: int = 1
    version: int = 0
    step: int = 0
    buffer: list[ClientUpdate] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")


@dataclass(frozen=True)
class StalenessWeight:
    client_id: int
    age: int
    variance: float
    weight: float

    def __post_init__(self) -> None:
        if self.age < 0 or self.variance < 0:
            raise ValueError("age and variance must be >= 0")
        if not 0.0 < self.weight <= 1.0:
            raise ValueError("weight must be in (0, 1]")


@dataclass(frozen=True)
class AggregationReport:
    """What one aggregation did: per-update weights and the applied mixture."""

    client_ids: tuple[int, ...]
    ages: tuple[int, ...]
    variances: tuple[float, ...] | None
    raw_weights: tuple[float, ...]
    lambdas: tuple[float, ...]
    combined: tuple[tuple[str, str, np.ndarray], ...]  # float64, mask order


def client_local_train(
    global_params: ParamSet,
    mask: SparseMask | None,
    loader,
    epochs: int,
    lr: float,
    seed: int,
) -> tuple[ParamSet, int]:
    """Run ``epochs`` passes of masked SGD from the received global model.

    ``loader`` maps an epoch seed to one epoch of batches; epoch seeds are
    derived from ``seed`` so the whole procedure is a pure function of its
    arguments. Returns the trained parameters and the shard size.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    local = global_params.copy()
    num_samples = 0
    for batch in loader(derive_seed(seed, 0)):
        num_samples += batch.size
    if num_samples == 0:
        raise EmptyShardError("loader produced no batches")
    for epoch in range(epochs):
        for batch in loader(derive_seed(seed, epoch)):
            _, grads = loss_and_grad(local, batch)
            local = sgd_step(local, grads, lr, mask=mask)
    return local, num_samples


def make_update(
    client_id: int,
    local: ParamSet,
    base: ParamSet,
    mask: SparseMask,
    base_version: int,
    received_step: int,
    num_samples: int,
) -> ClientUpdate:
    delta = extract_delta(local, base, mask)
    return ClientUpdate(client_id, delta, base_version, received_step, num_samples)


def compute_age(update: ClientUpdate, now_step: int) -> int:
    if now_step < update.received_step:
        raise ClockRegressionError(
            f"now_step {now_step} precedes received_step {update.received_step}"
        )
    return now_step - update.received_step


def compute_variance(update: ClientUpdate, mask: SparseMask) -> float:
    """Sum over selected tensors of the population variance of the delta.

    The masked local model is global + delta, so the elementwise
    difference (local - global) is the delta itself; no reconstruction
    round-trip is needed.
    """
    if update.delta.mask_id != mask.mask_id:
        raise MaskMismatchError("update delta does not match the server mask")
    total = 0.0
    for _, _, values in update.delta.tensors:
        total += float(np.var(values.astype(np.float64)))
    return total


def staleness_weight(age: int, variance: float) -> float:
    """1 / (1 + age * variance); equals 1 at age 0, decays with stale spread."""
    if age < 0:
        raise ValueError("age must be >= 0")
    if variance < 0:
        raise ValueError("variance must be >= 0")
    return 1.0 / (1.0 + age * variance)


def _update_age(state: ServerState, update: ClientUpdate, age_mode: str) -> int:
    if age_mode not in AGE_MODES:
        raise ValueError(f"age_mode must be one of {AGE_MODES}, got {age_mode!r}")
    if age_mode == "received_step":
        return compute_age(update, state.step)
    return state.version - update.base_version


def _normalize(raw: list[float]) -> list[float]:
    total = sum(raw)
    if total <= 0.0:
        raise ValueError("staleness weights must sum to a positive value")
    return [w / total for w in raw]


def _combine_and_apply(
    state: ServerState, updates: list[ClientUpdate], lambdas: list[float]
) -> tuple[tuple[str, str, np.ndarray], ...]:
    """global += sum_i lambda_i * delta_i on masked entries, float64 mixture."""
    combined = []
    accumulators: dict[tuple[str, str], np.ndarray] = {}
    for layer, unit in state.mask.selected_units():
        target = state.global_params.unit(layer, unit)
        accumulators[(layer, unit)] = np.zeros(target.size, dtype=np.float64)
    for lam, update in zip(lambdas, updates):
        if update.delta.mask_id != state.mask.mask_id:
            raise MaskMismatchError("buffered delta does not match the server mask")
        for layer, unit, values in update.delta.tensors:
            accumulators[(layer, unit)] += lam * values.astype(np.float64)
    for (layer, unit), acc in accumulators.items():
        target = state.global_params.unit(layer, unit)
        mixed = target.astype(np.float64).ravel() + acc
        target[...] = mixed.astype(np.float32).reshape(target.shape)
        combined.append((layer, unit, acc))
    return tuple(combined)


def _aggregate_buffered(
    state: ServerState,
    raw_weights: list[float],
    ages: list[int],
    variances: list[float] | None,
    sample_weighted: bool,
) -> AggregationReport:
    updates = list(state.buffer)
    if sample_weighted:
        raw_weights = [w * u.num_samples for w, u in zip(raw_weights, updates)]
    lambdas = _normalize(raw_weights)
    combined = _combine_and_apply(state, updates, lambdas)
    state.version += 1
    state.buffer.clear()
    return AggregationReport(
        client_ids=tuple(u.client_id for u in updates),
        ages=tuple(ages),
        variances=None if variances is None else tuple(variances),
        raw_weights=tuple(raw_weights),
        lambdas=tuple(lambdas),
        combined=combined,
    )


def receive_update(state: ServerState, update: ClientUpdate) -> None:
    if update.delta.mask_id != state.mask.mask_id:
        raise MaskMismatchError("received delta does not match the server mask")
    if update.base_version > state.version:
        raise ValueError("update claims a base_version newer than the server")
    if len(state.buffer) >= state.buffer_capacity:
        raise BufferNotFullError("buffer already at capacity; aggregate first")
    state.buffer.append(update)


def aggregate_ftte(
    state: ServerState,
    age_mode: str = "received_step",
    sample_weighted: bool = False,
) -> AggregationReport:
    """Staleness-weighted mixture: s_i = 1 / (1 + age_i * variance_i)."""
    if len(state.buffer) != state.buffer_capacity:
        raise BufferNotFullError(
            f"buffer holds {len(state.buffer)} of {state.buffer_capacity} updates"
        )
    records = []
    for update in state.buffer:
        age = _update_age(state, update, age_mode)
        variance = compute_variance(update, state.mask)
        weight = staleness_weight(age, variance)
        records.append(StalenessWeight(update.client_id, age, variance, weight))
    return _aggregate_buffered(
        state,
        raw_weights=[r.weight for r in records],
        ages=[r.age for r in records],
        variances=[r.variance for r in records],
        sample_weighted=sample_weighted,
    )


def aggregate_fedbuff(
    state: ServerState,
    exponent: float = 0.5,
    age_mode: str = "received_step",
    sample_weighted: bool = False,
) -> AggregationReport:
    """Age-only mixture: s_i = (1 + age_i) ** -exponent."""
    if len(state.buffer) != state.buffer_capacity:
        raise BufferNotFullError(
            f"buffer holds {len(state.buffer)} of {state.buffer_capacity} updates"
        )
    if exponent < 0:
        raise ValueError("exponent must be >= 0")
    ages = [_update_age(state, update, age_mode) for update in state.buffer]
    raw = [(1.0 + age) ** -exponent for age in ages]
    return _aggregate_buffered(
        state, raw_weights=raw, ages=ages, variances=None, sample_weighted=sample_weighted
    )


def aggregate_sync(
    state: ServerState,
    updates: list[ClientUpdate],
    expected_ids: list[int],
) -> AggregationReport:
    """Sample-count-weighted FedAvg round over the given updates."""
    got = {u.client_id for u in updates}
    missing = [cid for cid in expected_ids if cid not in got]
    if missing:
        raise MissingClientError(f"round is missing updates from clients {missing}")
    extra = got - set(expected_ids)
    if extra:
        raise ValueError(f"round has updates from unexpected clients {sorted(extra)}")
    raw = [float(u.num_samples) for u in updates]
    lambdas = _normalize(raw)
    combined = _combine_and_apply(state, updates, lambdas)
    state.version += 1
    ages = [compute_age(u, state.step) for u in updates]
    return AggregationReport(
        client_ids=tuple(u.client_id for u in updates),
        ages=tuple(ages),
        variances=None,
        raw_weights=tuple(raw),
        lambdas=tuple(lambdas),
        combined=combined,
    )


def apply_async(
    state: ServerState,
    update: ClientUpdate,
    mixing_rate: float = 0.6,
) -> AggregationReport:
    """Immediate mixing: global += mixing_rate * (1 + lag) ** -0.5 * delta."""
    if mixing_rate < 0:
        raise ValueError("mixing_rate must be >= 0")
    lag = state.version - update.base_version
    if lag < 0:
        raise ValueError("update claims a base_version newer than the server")
    staleness = (1.0 + lag) ** -0.5
    coefficient = mixing_rate * staleness
    combined = _combine_and_apply(state, [update], [coefficient])
    state.version += 1
    # the convex-mixture weight over a single update is trivially 1; the
    # absolute scale applied to the delta is the raw weight
    return AggregationReport(
        client_ids=(update.client_id,),
        ages=(lag,),
        variances=None,
        raw_weights=(coefficient,),
        lambdas=(1.0,),
        combined=combined,
    )
