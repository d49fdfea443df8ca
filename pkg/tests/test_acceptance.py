"""End-to-end acceptance checks: one test per shipping criterion.

Each test is self-contained (no imports from the other test modules), prints
a one-line measurement summary (visible under ``pytest -s``), and asserts its
own wall-clock cap. The convergence-trend tests pin full experiment configs
as literals; changing any field invalidates the recorded expectations.
"""

from __future__ import annotations

import itertools
import subprocess
import time
from pathlib import Path

import numpy as np

from ftte.config import build_config
from ftte.data import (
    PartitionSpec,
    dirichlet_partition,
    label_distribution,
    make_blobs,
    tv_distance,
)
from ftte.nn import (
    Batch,
    LayerParams,
    ModelSpec,
    ParamSet,
    UNIT_BIAS,
    forward,
    init_params,
    loss_and_grad,
)
from ftte.protocol import (
    ClientUpdate,
    ServerState,
    aggregate_ftte,
    aggregate_sync,
    make_update,
    receive_update,
    staleness_weight,
)
from ftte.rng import make_rng
from ftte.runner import prepare_experiment, simulate
from ftte.sim import steps_to_target
from ftte.sparse import (
    MemoryModel,
    SparseDelta,
    SparseMask,
    encode_delta,
    extract_delta,
    memory_cost,
    select_parameters,
)
from ftte.report import report_resources

QUICKSTART = Path(__file__).resolve().parents[1] / "configs" / "quickstart.json"


def _elapsed_ok(t0: float, cap_s: float, label: str) -> None:
    elapsed = time.perf_counter() - t0
    print(f"[{label}] runtime {elapsed:.2f}s (cap {cap_s:.0f}s)")
    assert elapsed < cap_s


# ---------------------------------------------------------------- criterion 1


def _fd_gradient(params: ParamSet, batch: Batch, h: float = 1e-3) -> ParamSet:
    # divide by the realised float32 step so parameter rounding does not
    # pollute the estimate
    grads = params.copy()
    for name, unit, arr in params.iter_units():
        garr = grads.unit(name, unit)
        flat = arr.reshape(-1)
        gflat = garr.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            hi_val = np.float32(float(orig) + h)
            lo_val = np.float32(float(orig) - h)
            flat[idx] = hi_val
            hi_loss, _ = loss_and_grad(params, batch)
            flat[idx] = lo_val
            lo_loss, _ = loss_and_grad(params, batch)
            flat[idx] = orig
            gflat[idx] = (hi_loss - lo_loss) / (float(hi_val) - float(lo_val))
    return grads


def test_criterion_01_gradients_match_finite_differences():
    t0 = time.perf_counter()
    rng = make_rng(101)
    worst = 0.0
    for trial in range(100):
        depth = int(rng.integers(2, 5))
        dims = tuple(int(rng.integers(2, 6)) for _ in range(depth))
        spec = ModelSpec(layer_dims=dims, init_seed=int(rng.integers(0, 2**31)))
        params = init_params(spec)
        for attempt in range(50):
            batch = Batch(
                rng.normal(0.0, 1.0, size=(4, dims[0])).astype(np.float32),
                rng.integers(0, dims[-1], size=4).astype(np.int64),
            )
            _, cache = forward(params, batch)
            hidden = cache.pre_activations[:-1]
            # keep hidden pre-activations away from the ReLU kink so the
            # central difference never straddles it
            if not hidden or min(np.abs(z).min() for z in hidden) > 0.02:
                break
        else:
            raise AssertionError(f"no kink-free batch found for trial {trial}")
        _, grads = loss_and_grad(params, batch)
        fd = _fd_gradient(params, batch)
        for name, unit, g in grads.iter_units():
            f = fd.unit(name, unit).astype(np.float64)
            g64 = g.astype(np.float64)
            err = np.abs(g64 - f)
            denom = np.maximum(np.maximum(np.abs(f), np.abs(g64)), 1e-3)
            rel = (err / denom).max()
            worst = max(worst, float(rel))
            assert rel < 1e-4, (dims, name, unit, rel)
    print(f"[criterion 1] 100 models, worst per-entry relative error {worst:.3g}")
    _elapsed_ok(t0, 30.0, "criterion 1")


# ---------------------------------------------------------------- criterion 2


def _dyadic_params(spec: ModelSpec, seed: int, step: float = 2.0**-10) -> ParamSet:
    params = init_params(spec)
    rng = make_rng(seed)
    for _, _, arr in params.iter_units():
        arr[...] = (rng.integers(-512, 512, size=arr.shape) * step).astype(np.float32)
    return params


def _constant_delta(mask: SparseMask, spec: ModelSpec, value: float) -> SparseDelta:
    tensors = []
    for layer, unit in mask.selected_units():
        count = spec.unit_counts()[(layer, unit)]
        tensors.append((layer, unit, np.full(count, value, dtype=np.float32)))
    return SparseDelta(mask.mask_id, tuple(tensors))


def test_criterion_02_aggregation_oracles():
    t0 = time.perf_counter()

    # (a) sync equals the sample-weighted parameter-space mean to 1e-7
    spec = ModelSpec(layer_dims=(4, 3, 2), init_seed=2)
    mask = SparseMask.full(spec)
    rng = make_rng(21)
    state = ServerState(
        global_params=init_params(spec), mask=mask, strategy="sync", buffer_capacity=1
    )
    base = state.global_params.copy()
    counts = [2, 5, 3]
    locals_ = []
    for _ in counts:
        local = base.copy()
        for _, _, arr in local.iter_units():
            arr += rng.uniform(-0.25, 0.25, size=arr.shape).astype(np.float32)
        locals_.append(local)
    updates = [
        make_update(cid, locals_[cid], base, mask, 0, 0, counts[cid])
        for cid in range(3)
    ]
    aggregate_sync(state, updates, expected_ids=[0, 1, 2])
    oracle = np.zeros(base.flatten().size, dtype=np.float64)
    for local, count in zip(locals_, counts):
        oracle += (count / sum(counts)) * local.flatten().astype(np.float64)
    sync_err = np.abs(state.global_params.flatten().astype(np.float64) - oracle).max()
    assert sync_err < 1e-7

    # (b) zero variance makes the buffered mixture a plain delta mean to 1e-12
    state = ServerState(
        global_params=_dyadic_params(spec, 5), mask=mask, strategy="ftte",
        buffer_capacity=3,
    )
    state.step = 4
    shifts = (1.0 / 64.0, -3.0 / 128.0, 5.0 / 256.0)
    for cid, (shift, received) in enumerate(zip(shifts, (4, 2, 0))):
        receive_update(
            state,
            ClientUpdate(cid, _constant_delta(mask, spec, shift), 0, received, 1),
        )
    report = aggregate_ftte(state)
    assert all(lam == 1.0 / 3.0 for lam in report.lambdas)
    mean_shift = sum(shifts) / 3.0
    mean_err = max(
        float(np.abs(arr - mean_shift).max()) for _, _, arr in report.combined
    )
    assert mean_err < 1e-12

    # (c) the two-update hand case: fresh zero-variance vs age-3 variance-1
    pair_mask = SparseMask.from_selected(spec, [("dense1", UNIT_BIAS)])
    state = ServerState(
        global_params=init_params(spec), mask=pair_mask, strategy="ftte",
        buffer_capacity=2,
    )
    state.step = 3
    fresh = SparseDelta(
        pair_mask.mask_id,
        (("dense1", UNIT_BIAS, np.array([0.5, 0.5], dtype=np.float32)),),
    )
    stale = SparseDelta(
        pair_mask.mask_id,
        (("dense1", UNIT_BIAS, np.array([1.0, -1.0], dtype=np.float32)),),
    )
    receive_update(state, ClientUpdate(0, fresh, 0, 3, 1))
    receive_update(state, ClientUpdate(1, stale, 0, 0, 1))
    report = aggregate_ftte(state)
    assert report.raw_weights == (1.0, 0.25)
    assert report.lambdas == (0.8, 0.2)

    print(
        f"[criterion 2] sync vs parameter mean {sync_err:.2e}; "
        f"zero-variance mixture vs delta mean {mean_err:.2e}; "
        f"hand lambdas {report.lambdas}"
    )
    _elapsed_ok(t0, 5.0, "criterion 2")


# ---------------------------------------------------------------- criterion 3


def test_criterion_03_staleness_weight_suite():
    t0 = time.perf_counter()
    for variance in (0.0, 0.5, 3.0, 1e6):
        assert staleness_weight(0, variance) == 1.0
    for age in (0, 1, 7, 10**6):
        assert staleness_weight(age, 0.0) == 1.0
    assert staleness_weight(2, 0.5) == 0.5
    assert staleness_weight(1, 1.0) == 0.5
    assert staleness_weight(3, 1.0) == 0.25
    for variance in (0.25, 0.5, 1.0, 2.0):
        weights = [staleness_weight(age, variance) for age in range(11)]
        assert all(a > b for a, b in zip(weights, weights[1:]))
        for age, w in enumerate(weights):
            assert w == 1.0 / (1.0 + age * variance)
    print("[criterion 3] boundary, exactness, and monotonicity checks all hold")
    _elapsed_ok(t0, 1.0, "criterion 3")


# ---------------------------------------------------------------- criterion 4


def _random_selection_instance(rng):
    num_layers = int(rng.integers(2, 7))  # up to 12 selectable units
    dims = tuple(int(rng.integers(2, 6)) for _ in range(num_layers + 1))
    spec = ModelSpec(layer_dims=dims, init_seed=0)
    mm = MemoryModel(
        activation_batch_size=int(rng.integers(1, 9)),
        optimizer_state_multiplier=int(rng.integers(0, 3)),
    )
    scores = {u: float(rng.uniform(0.0, 1.0)) for u in spec.unit_counts()}
    anchor = (spec.layer_names()[-1], UNIT_BIAS)
    lo = memory_cost(SparseMask.from_selected(spec, [anchor]), spec, mm)
    hi = memory_cost(SparseMask.full(spec), spec, mm)
    budget = int(rng.integers(lo, hi + 1))
    return spec, mm, scores, budget, anchor


def test_criterion_04_mask_selection_feasible_and_optimal():
    t0 = time.perf_counter()

    rng = make_rng(1404)
    for _ in range(200):
        spec, mm, scores, budget, anchor = _random_selection_instance(rng)
        mask = select_parameters(scores, spec, mm, budget)
        assert memory_cost(mask, spec, mm) <= budget
        assert mask.is_selected(*anchor)

    rng = make_rng(9404)
    matches = 0
    for _ in range(100):
        spec, mm, scores, budget, anchor = _random_selection_instance(rng)

        def cost_fn(selected, _spec=spec, _mm=mm, _anchor=anchor):
            chosen = SparseMask.from_selected(_spec, set(selected) | {_anchor})
            return memory_cost(chosen, _spec, _mm)

        mask = select_parameters(scores, spec, mm, budget)
        total = sum(scores[u] for u in mask.selected_units() if u != anchor)
        candidates = [u for u in spec.unit_counts() if u != anchor]
        best = 0.0
        for r in range(len(candidates) + 1):
            for combo in itertools.combinations(candidates, r):
                if cost_fn(frozenset(combo)) <= budget:
                    best = max(best, sum(scores[u] for u in combo))
        assert total <= best + 1e-12
        if abs(total - best) < 1e-12:
            matches += 1
    print(f"[criterion 4] 200/200 masks within budget; optimal on {matches}/100")
    assert matches >= 95
    _elapsed_ok(t0, 60.0, "criterion 4")


# ---------------------------------------------------------------- criterion 5


def test_criterion_05_trace_determinism_across_workers(tmp_path):
    t0 = time.perf_counter()
    traces = []
    for idx, workers in enumerate((1, 1, 8, 8)):
        out = tmp_path / f"run{idx}_w{workers}"
        proc = subprocess.run(
            [
                "ftte", "run", "--config", str(QUICKSTART), "--out", str(out),
                "--no-plots", "--set", f"workers={workers}",
            ],
            capture_output=True, text=True, timeout=110,
        )
        assert proc.returncode in (0, 2), proc.stderr
        traces.append((out / "trace.csv").read_bytes())
    assert all(t == traces[0] for t in traces[1:])
    print(
        f"[criterion 5] four runs (workers 1,1,8,8) produced byte-identical "
        f"traces of {len(traces[0])} bytes"
    )
    _elapsed_ok(t0, 120.0, "criterion 5")


# ------------------------------------------------------- criteria 6, 7, 9, 10


def _trend_run(base: dict, overrides: dict, seed: int):
    raw = dict(base)
    raw.update(overrides)
    raw["seed"] = seed
    config = build_config(raw)
    prepared = prepare_experiment(config, seed=seed)
    result = simulate(prepared)
    return steps_to_target(result.trace, config.target_accuracy), result


# two well-separated classes: a single aggregation can already clear the
# accuracy bar, so the contest is purely about waiting for stragglers
STRAGGLER_BASE = {
    "strategy": "ftte", "num_clients": 20, "buffer_size": 5, "budget_bytes": 6000,
    "num_classes": 2, "input_dim": 20, "samples_per_class": 2000,
    "class_separation": 4.0, "noise_sigma": 1.0,
    "alpha": 1.0, "min_samples_per_client": 8,
    "straggler_fraction": 0.5, "straggler_delay_max_s": 30.0,
    "target_accuracy": 0.9, "max_steps": 3000, "eval_every_aggregations": 1,
    "hidden_dims": [32],
}


def test_criterion_06_buffered_beats_sync_under_stragglers():
    t0 = time.perf_counter()
    ratios = []
    for seed in (1, 2, 3):
        ftte_rep, _ = _trend_run(STRAGGLER_BASE, {}, seed)
        sync_rep, _ = _trend_run(
            STRAGGLER_BASE, {"strategy": "sync", "mask_mode": "full"}, seed
        )
        assert ftte_rep.reached and sync_rep.reached
        ratios.append(ftte_rep.sim_time_to_target_s / sync_rep.sim_time_to_target_s)
    mean_ratio = sum(ratios) / len(ratios)
    print(
        f"[criterion 6] time-to-target ratios ftte/sync {ratios} "
        f"(mean {mean_ratio:.3f}, bar 0.5)"
    )
    assert mean_ratio <= 0.5
    _elapsed_ok(t0, 600.0, "criterion 6")


def test_criterion_07_sync_degrades_monotonically_with_stragglers():
    t0 = time.perf_counter()
    for seed in (1, 2, 3):
        times = []
        for fraction in (0.0, 0.3, 0.6, 0.9):
            rep, _ = _trend_run(
                STRAGGLER_BASE,
                {"strategy": "sync", "mask_mode": "full",
                 "straggler_fraction": fraction},
                seed,
            )
            assert rep.reached
            times.append(rep.sim_time_to_target_s)
        assert all(a <= b for a, b in zip(times, times[1:])), (seed, times)
        ftte_rep, _ = _trend_run(STRAGGLER_BASE, {"straggler_fraction": 0.9}, seed)
        assert ftte_rep.reached
        ratio = times[-1] / ftte_rep.sim_time_to_target_s
        print(
            f"[criterion 7] seed {seed}: sync times {['%.1f' % t for t in times]}, "
            f"sync/ftte at 0.9 = {ratio:.2f} (bar 2.0)"
        )
        assert ratio >= 2.0
    _elapsed_ok(t0, 900.0, "criterion 7")


# ---------------------------------------------------------------- criterion 8


def test_criterion_08_resource_accounting_hand_case():
    t0 = time.perf_counter()

    # dims (4,3,2), batch 1, no optimizer state. Full model: 23 values.
    # Frozen bytes 4*21, trainable output bias 2*4*2, activations 4*(4+3+2)
    # give 120 selected vs 220 full; payload is a 16-byte frame header plus
    # per-tensor headers (19 for bias, 22 for weights) plus 4 bytes a value
    config = build_config({
        "strategy": "ftte", "num_clients": 4, "buffer_size": 2,
        "budget_bytes": 10**6, "input_dim": 4, "hidden_dims": [3],
        "num_classes": 2, "batch_size": 1, "seed": 0,
    })
    spec = ModelSpec(layer_dims=(4, 3, 2), init_seed=0)
    bias_mask = SparseMask.from_selected(spec, [("dense1", UNIT_BIAS)])
    resources = report_resources(config, mask=bias_mask)
    assert resources["memory_bytes"]["selected"] == 120
    assert resources["memory_bytes"]["full"] == 220
    assert resources["memory_bytes"]["last_layer"] == 144
    assert resources["payload_bytes"]["selected"] == 43
    assert resources["payload_bytes"]["full"] == 190
    assert abs(resources["memory_reduction_pct"]["selected"] - (100 - 100 * 120 / 220)) < 1e-9
    assert abs(resources["payload_reduction_pct"]["selected"] - (100 - 100 * 43 / 190)) < 1e-9

    # upload bound: sparse payload <= density * full payload + 64 per tensor
    bound_spec = ModelSpec(layer_dims=(6, 8, 4), init_seed=3)
    base = init_params(bound_spec)
    rng = make_rng(88)
    local = base.copy()
    for _, _, arr in local.iter_units():
        arr += rng.normal(0.0, 0.1, size=arr.shape).astype(np.float32)
    full_mask = SparseMask.full(bound_spec)
    full_bytes = len(encode_delta(extract_delta(local, base, full_mask)))
    units = list(bound_spec.unit_counts())
    total_values = bound_spec.num_params()
    for trial in range(10):
        size = int(rng.integers(1, len(units) + 1))
        picked = [units[i] for i in rng.permutation(len(units))[:size]]
        mask = SparseMask.from_selected(bound_spec, picked)
        payload = len(encode_delta(extract_delta(local, base, mask)))
        density = sum(bound_spec.unit_counts()[u] for u in picked) / total_values
        assert payload <= density * full_bytes + 64 * len(picked)

    print(
        "[criterion 8] hand case: memory 120/220 bytes (45.5% saved), "
        "payload 43/190 bytes (77.4% saved); upload bound held on 10 masks"
    )
    _elapsed_ok(t0, 1.0, "criterion 8")


# ---------------------------------------------------------------- criterion 9


def test_criterion_09_variance_weighting_beats_age_only():
    t0 = time.perf_counter()
    # four moderately separated classes and five local epochs give straggler
    # updates enough drift for the variance term to bite
    base = {
        "strategy": "ftte", "num_clients": 20, "buffer_size": 5,
        "budget_bytes": 6000, "num_classes": 4, "input_dim": 20,
        "samples_per_class": 1000, "class_separation": 2.5, "noise_sigma": 1.0,
        "alpha": 0.1, "min_samples_per_client": 8,
        "straggler_fraction": 0.5, "straggler_delay_max_s": 30.0,
        "local_epochs": 5, "lr": 0.1, "batch_size": 8,
        "target_accuracy": 0.70, "max_steps": 3000, "eval_every_aggregations": 1,
        "hidden_dims": [32],
    }
    wins = 0
    rows = []
    for seed in (1, 2, 3, 4, 5):
        ftte_rep, _ = _trend_run(base, {}, seed)
        fedbuff_rep, _ = _trend_run(base, {"strategy": "fedbuff"}, seed)
        ftte_steps = ftte_rep.steps_to_target if ftte_rep.reached else None
        fedbuff_steps = fedbuff_rep.steps_to_target if fedbuff_rep.reached else None
        won = ftte_steps is not None and (
            fedbuff_steps is None or ftte_steps <= fedbuff_steps
        )
        wins += won
        rows.append(f"seed {seed}: ftte {ftte_steps} vs age-only {fedbuff_steps}")
    print(f"[criterion 9] {'; '.join(rows)} -> {wins}/5 wins (bar 4)")
    assert wins >= 4
    _elapsed_ok(t0, 900.0, "criterion 9")


# --------------------------------------------------------------- criterion 10


def test_criterion_10_five_hundred_client_smoke():
    t0 = time.perf_counter()
    base = {
        "strategy": "ftte", "num_clients": 500, "buffer_size": 10,
        "budget_bytes": 6000, "num_classes": 2, "input_dim": 20,
        "samples_per_class": 4000, "class_separation": 4.0, "noise_sigma": 1.0,
        "test_fraction": 0.2, "calibration_fraction": 0.1,
        "alpha": 1.0, "min_samples_per_client": 8,
        "straggler_fraction": 0.5, "straggler_delay_max_s": 30.0,
        "target_accuracy": 0.85, "max_steps": 5000, "eval_every_aggregations": 1,
        "hidden_dims": [32],
    }
    ftte_rep, ftte_res = _trend_run(base, {}, seed=1)
    ftte_wall = time.perf_counter() - t0
    assert ftte_wall < 600.0
    assert ftte_rep.reached

    sync_rep, _ = _trend_run(base, {"strategy": "sync", "mask_mode": "full"}, seed=1)
    within_budget = (
        sync_rep.reached
        and sync_rep.sim_time_to_target_s <= ftte_rep.sim_time_to_target_s
    )
    assert not within_budget
    sync_time = sync_rep.sim_time_to_target_s if sync_rep.reached else None
    print(
        f"[criterion 10] 500-client run reached 0.85 at sim {ftte_rep.sim_time_to_target_s:.1f}s "
        f"({ftte_res.step} steps, wall {ftte_wall:.1f}s); sync needed sim {sync_time}s"
    )
    _elapsed_ok(t0, 600.0, "criterion 10")


# --------------------------------------------------------------- criterion 11


def test_criterion_11_dirichlet_alpha_orders_heterogeneity():
    t0 = time.perf_counter()
    dataset = make_blobs(4, 10, 400, 4.0, 1.0, seed=7)
    global_dist = label_distribution(dataset, np.arange(len(dataset.labels)))
    means = {}
    for alpha in (0.1, 1.0, 100000.0):
        per_seed = []
        for seed in (1, 2, 3, 4, 5):
            part = dirichlet_partition(
                dataset,
                PartitionSpec(
                    num_clients=20, alpha=alpha, seed=seed, min_samples_per_client=2
                ),
            )
            tvs = [
                tv_distance(label_distribution(dataset, part.shard(cid)), global_dist)
                for cid in range(part.num_clients)
            ]
            per_seed.append(float(np.mean(tvs)))
        means[alpha] = float(np.mean(per_seed))
    print(
        f"[criterion 11] mean TV by alpha: "
        + ", ".join(f"{a}: {m:.4f}" for a, m in means.items())
    )
    assert means[0.1] > means[1.0] > means[100000.0]
    _elapsed_ok(t0, 30.0, "criterion 11")
