"""Cross-run comparison tables and the client resource report.

The speedup table compares strategies against the buffered variance-aware
baseline run by run: ratios are only meaningful between runs that trained on
the same data, so runs are grouped by (dataset_seed, partition_seed) and the
seed sets must line up across strategies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig
from .nn import ModelSpec, init_params
from .sim import _frame_bytes
from .sparse import MemoryModel, SparseMask, memory_cost

REFERENCE_STRATEGY = "ftte"


class IncompatibleRunsError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyRow:
    strategy: str
    runs: int
    reached_all: bool
    any_oscillating: bool
    mean_steps: float | None  # mean over runs that reached
    mean_time_s: float | None
    ratio: float | None  # vs reference, None when not computable
    ratio_is_lower_bound: bool
    steps_display: str
    ratio_display: str


def format_step_budget(max_steps: int) -> str:
    if max_steps >= 1000 and max_steps % 1000 == 0:
        return f"{max_steps // 1000}k"
    return str(max_steps)


def format_ratio(ratio: float, lower_bound: bool = False) -> str:
    text = f"×{ratio:.2f}" if ratio < 100 else f"×{ratio:.1f}"
    return f"> {text}" if lower_bound else text


def load_summaries(directory) -> list[dict]:
    directory = Path(directory)
    summaries = []
    for path in sorted(directory.rglob("summary.json")):
        with open(path, "r", encoding="utf-8") as fh:
            record = json.load(fh)
        record["_path"] = str(path)
        summaries.append(record)
    if not summaries:
        raise IncompatibleRunsError(f"no summary.json files under {directory}")
    return summaries


def _check_compatible(summaries: list[dict]) -> None:
    by_strategy: dict[str, dict[int, dict]] = {}
    for record in summaries:
        per_seed = by_strategy.setdefault(record["strategy"], {})
        seed = record["seed"]
        if seed in per_seed:
            raise IncompatibleRunsError(
                f"duplicate run for strategy {record['strategy']!r} seed {seed}"
            )
        per_seed[seed] = record
    if len(by_strategy) < 2:
        raise IncompatibleRunsError(
            "need runs from at least two strategies to compare"
        )
    seed_sets = {s: frozenset(runs) for s, runs in by_strategy.items()}
    reference = next(iter(seed_sets.values()))
    if any(seeds != reference for seeds in seed_sets.values()):
        raise IncompatibleRunsError(
            f"strategies were run on different seed sets: "
            f"{ {s: sorted(v) for s, v in seed_sets.items()} }"
        )
    for seed in reference:
        keys = {
            (runs[seed]["dataset_seed"], runs[seed]["partition_seed"])
            for runs in by_strategy.values()
        }
        if len(keys) != 1:
            raise IncompatibleRunsError(
                f"seed {seed}: runs disagree on dataset/partition seeds"
            )


def build_speedup_table(summaries: list[dict]) -> list[StrategyRow]:
    _check_compatible(summaries)
    by_strategy: dict[str, dict[int, dict]] = {}
    for record in summaries:
        by_strategy.setdefault(record["strategy"], {})[record["seed"]] = record
    if REFERENCE_STRATEGY not in by_strategy:
        raise IncompatibleRunsError(
            f"reference strategy {REFERENCE_STRATEGY!r} is missing from the runs"
        )
    seeds = sorted(next(iter(by_strategy.values())))
    reference_runs = by_strategy[REFERENCE_STRATEGY]
    if not all(reference_runs[s]["reached"] for s in seeds):
        raise IncompatibleRunsError(
            f"reference strategy {REFERENCE_STRATEGY!r} did not reach the target "
            "on every seed; ratios would be meaningless"
        )
    ref_mean_steps = sum(reference_runs[s]["steps_to_target"] for s in seeds) / len(seeds)
    rows = []
    for strategy in sorted(by_strategy, key=lambda s: (s != REFERENCE_STRATEGY, s)):
        runs = [by_strategy[strategy][s] for s in seeds]
        reached_all = all(r["reached"] for r in runs)
        any_osc = any(r["oscillating"] for r in runs)
        max_steps = max(r["max_steps"] for r in runs)
        if reached_all:
            mean_steps = sum(r["steps_to_target"] for r in runs) / len(runs)
            mean_time = sum(r["sim_time_to_target_s"] for r in runs) / len(runs)
            ratio = mean_steps / ref_mean_steps
            lower = False
            steps_display = f"{mean_steps:.0f}"
        else:
            mean_steps = None
            mean_time = None
            ratio = max_steps / ref_mean_steps
            lower = True
            steps_display = (
                "Osc." if any_osc else f"> {format_step_budget(max_steps)}"
            )
        rows.append(
            StrategyRow(
                strategy=strategy,
                runs=len(runs),
                reached_all=reached_all,
                any_oscillating=any_osc,
                mean_steps=mean_steps,
                mean_time_s=mean_time,
                ratio=ratio,
                ratio_is_lower_bound=lower,
                steps_display=steps_display,
                ratio_display=format_ratio(ratio, lower_bound=lower),
            )
        )
    return rows


def render_speedup_text(rows: list[StrategyRow]) -> str:
    header = f"{'strategy':<10} {'runs':>4} {'steps_to_target':>16} {'vs ftte':>12} {'time_to_target_s':>17}"
    lines = [header, "-" * len(header)]
    for row in rows:
        time_text = f"{row.mean_time_s:.1f}" if row.mean_time_s is not None else "-"
        lines.append(
            f"{row.strategy:<10} {row.runs:>4} {row.steps_display:>16} "
            f"{row.ratio_display:>12} {time_text:>17}"
        )
    return "\n".join(lines) + "\n"


def write_speedup_csv(rows: list[StrategyRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("strategy,runs,mean_steps,mean_time_s,ratio,steps_display,ratio_display\n")
        for row in rows:
            mean_steps = "" if row.mean_steps is None else f"{row.mean_steps:.6g}"
            mean_time = "" if row.mean_time_s is None else f"{row.mean_time_s:.6g}"
            fh.write(
                f"{row.strategy},{row.runs},{mean_steps},{mean_time},"
                f"{row.ratio:.6g},{row.steps_display},{row.ratio_display}\n"
            )


def report_resources(config: ExperimentConfig, mask: SparseMask | None = None) -> dict:
    """Memory and payload footprint of the run's mask vs full and head-only."""
    from .runner import prepare_experiment

    if mask is None:
        prepared = prepare_experiment(config)
        mask, spec, params = prepared.mask, prepared.spec, prepared.initial_params
        memory_model = prepared.memory_model
    else:
        spec = ModelSpec(layer_dims=config.layer_dims(), init_seed=0)
        params = init_params(spec)
        memory_model = MemoryModel(
            activation_batch_size=config.batch_size,
            optimizer_state_multiplier=config.optimizer_state_multiplier,
        )
    full = SparseMask.full(spec)
    head = SparseMask.last_layer(spec)
    masks = {"selected": mask, "full": full, "last_layer": head}
    memory = {name: memory_cost(m, spec, memory_model) for name, m in masks.items()}
    payload = {name: _frame_bytes(params, m) for name, m in masks.items()}

    def reduction(kind: str, name: str) -> float:
        table = memory if kind == "memory" else payload
        return 100.0 * (1.0 - table[name] / table["full"])

    return {
        "mask_mode": config.resolved_mask_mode(),
        "selected_values": mask.selected_value_count(spec),
        "total_values": full.selected_value_count(spec),
        "density": mask.density(spec),
        "memory_bytes": memory,
        "payload_bytes": payload,
        "memory_reduction_pct": {
            name: reduction("memory", name) for name in masks
        },
        "payload_reduction_pct": {
            name: reduction("payload", name) for name in masks
        },
        "budget_bytes": config.budget_bytes,
    }


def render_resources_text(report: dict) -> str:
    lines = [
        f"mask mode: {report['mask_mode']}   "
        f"density: {report['density']:.4f} "
        f"({report['selected_values']}/{report['total_values']} values)",
    ]
    if report["budget_bytes"] is not None:
        lines.append(f"memory budget: {report['budget_bytes']} bytes")
    lines.append(f"{'variant':<12} {'train_memory_B':>15} {'payload_B':>10} {'mem_saved':>10} {'pay_saved':>10}")
    for name in ("selected", "full", "last_layer"):
        lines.append(
            f"{name:<12} {report['memory_bytes'][name]:>15} "
            f"{report['payload_bytes'][name]:>10} "
            f"{report['memory_reduction_pct'][name]:>9.1f}% "
            f"{report['payload_reduction_pct'][name]:>9.1f}%"
        )
    return "\n".join(lines) + "\n"
