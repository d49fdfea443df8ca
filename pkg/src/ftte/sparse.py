"""Server-side trainable-subset selection and sparse delta transport.

Selection granularity is one unit per layer tensor (weights or bias). The
memory model charges a client for: frozen storage of unselected
parameters, parameter + gradient (+ optimizer state) storage of selected
ones, and backward-path activations for every layer from the earliest
selected layer to the output. Selection is a greedy knapsack on
score-per-incremental-byte, re-costed after every pick because widening
the mask toward the input extends the activation span.

Deltas travel in a small binary frame (magic "FTSD") so payload sizes in
the simulator match what a real wire would carry byte for byte.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .nn import ModelSpec, ParamSet, UNIT_BIAS, UNIT_WEIGHTS, loss_and_grad
from .rng import derive_seed, fnv1a64, make_rng

FTSD_MAGIC = b"FTSD"


class MaskConsistencyError(ValueError):
    """Mask entries do not line up with the model architecture."""


class InfeasibleBudgetError(ValueError):
    """Even the minimal mask (output bias only) exceeds the byte budget."""


class MaskMismatchError(ValueError):
    """A delta was produced under a different mask than the one in force."""


class DeltaShapeError(ValueError):
    """Delta value counts disagree with the mask or model."""


@dataclass(frozen=True)
class DeviceProfile:
    client_id: int
    memory_budget_bytes: int

    def __post_init__(self) -> None:
        if self.memory_budget_bytes <= 0:
            raise ValueError("memory_budget_bytes must be > 0")


def tightest_budget(profiles: list[DeviceProfile]) -> int:
    """The binding constraint: the smallest budget across the fleet."""
    if not profiles:
        raise ValueError("need at least one device profile")
    return min(p.memory_budget_bytes for p in profiles)


@dataclass(frozen=True)
class MemoryModel:
    activation_batch_size: int
    optimizer_state_multiplier: int = 0
    bytes_per_value: int = 4

    def __post_init__(self) -> None:
        if self.activation_batch_size < 1:
            raise ValueError("activation_batch_size must be >= 1")
        if self.optimizer_state_multiplier < 0:
            raise ValueError("optimizer_state_multiplier must be >= 0")
        if self.bytes_per_value < 1:
            raise ValueError("bytes_per_value must be >= 1")


@dataclass(frozen=True)
class MaskEntry:
    layer: str
    unit: str
    selected: bool


@dataclass(frozen=True)
class SparseMask:
    """Selection flags for every (layer, unit) of a model, in layer order."""

    entries: tuple[MaskEntry, ...]

    @staticmethod
    def from_selected(spec: ModelSpec, selected) -> "SparseMask":
        chosen = set(selected)
        entries = []
        for layer, unit in spec.unit_counts():
            entries.append(MaskEntry(layer, unit, (layer, unit) in chosen))
        unknown = chosen - {(e.layer, e.unit) for e in entries}
        if unknown:
            raise MaskConsistencyError(f"selected units not in model: {sorted(unknown)}")
        return SparseMask(tuple(entries))

    @staticmethod
    def full(spec: ModelSpec) -> "SparseMask":
        return SparseMask.from_selected(spec, list(spec.unit_counts()))

    @staticmethod
    def last_layer(spec: ModelSpec) -> "SparseMask":
        name = spec.layer_names()[-1]
        return SparseMask.from_selected(spec, [(name, UNIT_WEIGHTS), (name, UNIT_BIAS)])

    def is_selected(self, layer: str, unit: str) -> bool:
        for e in self.entries:
            if e.layer == layer and e.unit == unit:
                return e.selected
        raise KeyError(f"unknown unit ({layer!r}, {unit!r})")

    def selected_units(self) -> list[tuple[str, str]]:
        return [(e.layer, e.unit) for e in self.entries if e.selected]

    def tensor_names(self) -> list[str]:
        return [f"{layer}.{unit}" for layer, unit in self.selected_units()]

    @property
    def mask_id(self) -> int:
        return fnv1a64(";".join(self.tensor_names()).encode())

    def validate_against(self, spec: ModelSpec) -> None:
        expected = [(layer, unit) for layer, unit in spec.unit_counts()]
        actual = [(e.layer, e.unit) for e in self.entries]
        if actual != expected:
            raise MaskConsistencyError(
                f"mask units {actual} do not match model units {expected}"
            )

    def selected_value_count(self, spec: ModelSpec) -> int:
        self.validate_against(spec)
        counts = spec.unit_counts()
        return sum(counts[u] for u in self.selected_units())

    def density(self, spec: ModelSpec) -> float:
        return self.selected_value_count(spec) / spec.num_params()


def memory_cost(mask: SparseMask, spec: ModelSpec, mm: MemoryModel) -> int:
    """Client-side training footprint in bytes under the given mask.

    frozen params are stored once; selected params are stored with their
    gradient and optimizer state; activations are charged for every layer
    from the earliest selected layer through the output, including that
    layer's input width.
    """
    mask.validate_against(spec)
    counts = spec.unit_counts()
    bpv = mm.bytes_per_value
    frozen = 0
    trainable = 0
    earliest: int | None = None
    layer_index = {name: i for i, name in enumerate(spec.layer_names())}
    for entry in mask.entries:
        n = counts[(entry.layer, entry.unit)]
        if entry.selected:
            trainable += n * bpv * (2 + mm.optimizer_state_multiplier)
            idx = layer_index[entry.layer]
            earliest = idx if earliest is None else min(earliest, idx)
        else:
            frozen += n * bpv
    activations = 0
    if earliest is not None:
        span = spec.layer_dims[earliest:]
        activations = mm.activation_batch_size * bpv * int(sum(span))
    return frozen + trainable + activations


def estimate_contribution(
    global_params: ParamSet,
    calib,
    num_batches: int,
    seed: int,
    lr: float = 0.1,
    local_steps: int = 3,
    batch_size: int = 32,
) -> dict[tuple[str, str], float]:
    """First-order benefit proxy per unit: accumulated |gradient| x step size.

    Calibration batches come from one seeded permutation of the split,
    cycled when num_batches exceeds the split; the per-unit score is the
    sum over batches of the mean absolute gradient, scaled by
    lr * local_steps. Summing (not averaging) over batches keeps the
    documented linearity: identical batches double the score exactly.
    """
    if num_batches < 1:
        raise ValueError("num_batches must be >= 1")
    if len(calib) < 1:
        raise ValueError("calibration set is empty")
    order = make_rng(derive_seed(seed, "calibration")).permutation(len(calib))
    shuffled = calib.subset(order)
    base_batches = list(shuffled.iter_batches(batch_size))
    per_unit: dict[tuple[str, str], list[float]] = {
        (layer, unit): [] for layer, unit, _ in global_params.iter_units()
    }
    for b in range(num_batches):
        batch = base_batches[b % len(base_batches)]
        _, grads = loss_and_grad(global_params, batch)
        for layer, unit, g in grads.iter_units():
            per_unit[(layer, unit)].append(float(np.abs(g.astype(np.float64)).mean()))
    scale = lr * local_steps
    return {key: scale * math.fsum(vals) for key, vals in per_unit.items()}


# 2^14 subset costings still finish in well under a second; beyond that the
# exact search is abandoned for the ratio greedy
EXACT_SEARCH_MAX_UNITS = 14


def exhaustive_knapsack(units, scores, cost_fn, budget, tie_key):
    """Exact subset search: maximize total score subject to cost <= budget.

    Score ties prefer the larger subset (an unconstrained budget must select
    everything, even zero-score units); remaining ties fall to the smallest
    sorted ``tie_key`` tuple so the result is order-independent.
    """
    if len(units) > EXACT_SEARCH_MAX_UNITS:
        raise ValueError(f"{len(units)} units is too many to enumerate")
    base = cost_fn(frozenset())
    if base > budget:
        raise InfeasibleBudgetError(f"baseline cost {base} exceeds budget {budget}")
    ordered = sorted(units, key=tie_key)
    best_set: set = set()
    best_key = (0.0, 0, ())
    for bits in range(1, 1 << len(ordered)):
        subset = {ordered[i] for i in range(len(ordered)) if bits >> i & 1}
        if cost_fn(frozenset(subset)) > budget:
            continue
        key = (
            sum(scores[u] for u in subset),
            len(subset),
            tuple(sorted(tie_key(u) for u in subset)),
        )
        if key[0] > best_key[0] or (
            key[0] == best_key[0]
            and (key[1] > best_key[1] or (key[1] == best_key[1] and key[2] < best_key[2]))
        ):
            best_key = key
            best_set = subset
    return best_set


def greedy_knapsack(units, scores, cost_fn, budget, tie_key):
    """Greedy subset build on score-per-incremental-byte with skip semantics.

    Each round re-costs every remaining unit against the current set (costs
    may be interdependent), keeps those that still fit, and takes the best
    ratio; ties prefer the smallest ``tie_key``. Stops when nothing fits.
    """
    selected: set = set()
    current = cost_fn(frozenset(selected))
    if current > budget:
        raise InfeasibleBudgetError(f"baseline cost {current} exceeds budget {budget}")
    remaining = list(units)
    while remaining:
        best = None
        for u in remaining:
            total = cost_fn(frozenset(selected | {u}))
            if total > budget:
                continue
            increment = total - current
            if increment <= 0:
                raise ValueError(f"adding {u!r} did not increase cost")
            ratio = scores[u] / increment
            candidate = (ratio, u, total)
            if best is None or ratio > best[0] or (
                ratio == best[0] and tie_key(u) < tie_key(best[1])
            ):
                best = candidate
        if best is None:
            break
        _, unit, current = best
        selected.add(unit)
        remaining.remove(unit)
    return selected


def select_parameters(
    scores: dict[tuple[str, str], float],
    spec: ModelSpec,
    mm: MemoryModel,
    budget_bytes: int,
) -> SparseMask:
    """Pick the trainable units for the run, output bias always included.

    The output-layer bias is seeded unconditionally so every mask can move
    the decision boundary. The remaining units are chosen by exact subset
    search when few enough to enumerate (a (layer,unit) granularity model
    rarely has more than a dozen) and otherwise compete greedily on
    score-per-incremental-byte under the budget.
    """
    all_units = list(spec.unit_counts())
    missing = [u for u in all_units if u not in scores]
    if missing:
        raise KeyError(f"scores missing for units: {missing}")
    anchor = (spec.layer_names()[-1], UNIT_BIAS)
    base_cost = memory_cost(SparseMask.from_selected(spec, [anchor]), spec, mm)
    if base_cost > budget_bytes:
        raise InfeasibleBudgetError(
            f"minimal mask needs {base_cost} bytes, budget is {budget_bytes}"
        )
    layer_index = {name: i for i, name in enumerate(spec.layer_names())}

    def cost_fn(selected: frozenset) -> int:
        mask = SparseMask.from_selected(spec, set(selected) | {anchor})
        return memory_cost(mask, spec, mm)

    def tie_key(unit: tuple[str, str]):
        layer, unit_name = unit
        return (-layer_index[layer], unit_name)

    candidates = [u for u in all_units if u != anchor]
    if len(candidates) <= EXACT_SEARCH_MAX_UNITS:
        chosen = exhaustive_knapsack(candidates, scores, cost_fn, budget_bytes, tie_key)
    else:
        chosen = greedy_knapsack(candidates, scores, cost_fn, budget_bytes, tie_key)
    return SparseMask.from_selected(spec, chosen | {anchor})


@dataclass(frozen=True)
class SparseDelta:
    """Per-tensor float32 value differences for the selected units only."""

    mask_id: int
    tensors: tuple[tuple[str, str, np.ndarray], ...]  # (layer, unit, flat f32)

    def value_count(self) -> int:
        return sum(arr.size for _, _, arr in self.tensors)

    def scaled(self, factor: float) -> "SparseDelta":
        f = np.float32(factor)
        return SparseDelta(
            self.mask_id,
            tuple((layer, unit, f * arr) for layer, unit, arr in self.tensors),
        )


def extract_delta(local: ParamSet, base: ParamSet, mask: SparseMask) -> SparseDelta:
    """local - base on the selected tensors, flattened float32."""
    tensors = []
    for layer, unit in mask.selected_units():
        lv = local.unit(layer, unit)
        bv = base.unit(layer, unit)
        if lv.shape != bv.shape:
            raise DeltaShapeError(f"shape mismatch on {layer}.{unit}")
        tensors.append((layer, unit, (lv - bv).astype(np.float32).ravel()))
    return SparseDelta(mask.mask_id, tuple(tensors))


def apply_delta(
    target: ParamSet,
    delta: SparseDelta,
    weight: float,
    mask: SparseMask | None = None,
) -> ParamSet:
    """target + weight * delta on the delta's tensors; everything else untouched.

    Passing the experiment mask enforces that the delta was produced under
    it; aggregation paths always do.
    """
    if mask is not None and mask.mask_id != delta.mask_id:
        raise MaskMismatchError(
            f"delta mask {delta.mask_id:#x} does not match expected {mask.mask_id:#x}"
        )
    out = target.copy()
    w32 = np.float32(weight)
    for layer, unit, values in delta.tensors:
        arr = out.unit(layer, unit)
        if values.size != arr.size:
            raise DeltaShapeError(
                f"{layer}.{unit} carries {values.size} values, tensor has {arr.size}"
            )
        arr += w32 * values.reshape(arr.shape)
    return out


def encode_delta(delta: SparseDelta) -> bytes:
    """The FTSD frame: magic, u64 mask id, u32 count, then named tensors."""
    out = [FTSD_MAGIC, struct.pack("<QI", delta.mask_id, len(delta.tensors))]
    for layer, unit, values in delta.tensors:
        name = f"{layer}.{unit}".encode()
        out.append(struct.pack("<I", len(name)))
        out.append(name)
        out.append(struct.pack("<I", values.size))
        out.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    return b"".join(out)


def decode_delta(payload: bytes) -> SparseDelta:
    if len(payload) < 16 or payload[:4] != FTSD_MAGIC:
        raise DeltaShapeError("missing FTSD header")
    mask_id, count = struct.unpack("<QI", payload[4:16])
    offset = 16
    tensors = []
    for _ in range(count):
        if offset + 4 > len(payload):
            raise DeltaShapeError("truncated tensor name length")
        (name_len,) = struct.unpack("<I", payload[offset : offset + 4])
        offset += 4
        name = payload[offset : offset + name_len].decode()
        offset += name_len
        if offset + 4 > len(payload):
            raise DeltaShapeError("truncated value count")
        (n,) = struct.unpack("<I", payload[offset : offset + 4])
        offset += 4
        end = offset + 4 * n
        if end > len(payload):
            raise DeltaShapeError("truncated tensor values")
        values = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).copy()
        offset = end
        layer, _, unit = name.partition(".")
        if not layer or not unit:
            raise DeltaShapeError(f"malformed tensor name {name!r}")
        tensors.append((layer, unit, values.astype(np.float32)))
    if offset != len(payload):
        raise DeltaShapeError(f"{len(payload) - offset} trailing bytes")
    return SparseDelta(mask_id, tuple(tensors))


def encoded_size(delta: SparseDelta) -> int:
    size = 16
    for layer, unit, values in delta.tensors:
        size += 4 + len(f"{layer}.{unit}".encode()) + 4 + 4 * values.size
    return size
