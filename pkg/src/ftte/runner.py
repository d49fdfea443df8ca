"""End-to-end experiment pipeline: data, model, mask, partition, simulate.

Everything downstream of the master seed is derived through labeled seed
paths, so two runs of the same resolved config produce byte-identical
artifacts regardless of host or worker count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig
from .data import (
    LabeledDataset,
    Partition,
    PartitionSpec,
    dirichlet_partition,
    make_blobs,
    split_dataset,
)
from .nn import ModelSpec, ParamSet, init_params
from .rng import derive_seed
from .sim import SimResult, run_simulation, steps_to_target, write_trace_csv
from .sparse import (
    MemoryModel,
    SparseMask,
    estimate_contribution,
    memory_cost,
    select_parameters,
)


@dataclass
class PreparedExperiment:
    config: ExperimentConfig
    seed: int
    dataset_seed: int
    partition_seed: int
    spec: ModelSpec
    initial_params: ParamSet
    mask: SparseMask
    memory_model: MemoryModel
    train: LabeledDataset
    test: LabeledDataset
    calibration: LabeledDataset
    partition: Partition


def prepare_experiment(config: ExperimentConfig, seed: int | None = None) -> PreparedExperiment:
    seed = config.seed if seed is None else seed
    dataset_seed = derive_seed(seed, "data")
    partition_seed = derive_seed(seed, "partition")
    dataset = make_blobs(
        config.num_classes,
        config.input_dim,
        config.samples_per_class,
        config.class_separation,
        config.noise_sigma,
        seed=dataset_seed,
    )
    train, test, calibration = split_dataset(
        dataset, config.test_fraction, config.calibration_fraction,
        seed=derive_seed(seed, "holdout"),
    )
    spec = ModelSpec(
        layer_dims=config.layer_dims(), init_seed=derive_seed(seed, "init")
    )
    params = init_params(spec)
    memory_model = MemoryModel(
        activation_batch_size=config.batch_size,
        optimizer_state_multiplier=config.optimizer_state_multiplier,
    )
    mode = config.resolved_mask_mode()
    if mode == "full":
        mask = SparseMask.full(spec)
    elif mode == "last_layer":
        mask = SparseMask.last_layer(spec)
    else:
        scores = estimate_contribution(
            params,
            calibration,
            num_batches=config.calibration_batches,
            seed=derive_seed(seed, "select"),
            lr=config.lr,
            batch_size=config.calibration_batch_size,
        )
        mask = select_parameters(scores, spec, memory_model, config.budget_bytes)
    partition = dirichlet_partition(
        train,
        PartitionSpec(
            num_clients=config.num_clients,
            alpha=config.alpha,
            seed=partition_seed,
            min_samples_per_client=config.min_samples_per_client,
        ),
    )
    return PreparedExperiment(
        config=config,
        seed=seed,
        dataset_seed=dataset_seed,
        partition_seed=partition_seed,
        spec=spec,
        initial_params=params,
        mask=mask,
        memory_model=memory_model,
        train=train,
        test=test,
        calibration=calibration,
        partition=partition,
    )


def simulate(prepared: PreparedExperiment) -> SimResult:
    sim_config = prepared.config.to_sim_config(seed=prepared.seed)
    return run_simulation(
        sim_config,
        prepared.initial_params,
        prepared.mask,
        prepared.train,
        prepared.partition,
        prepared.test,
    )


def summarize(prepared: PreparedExperiment, result: SimResult) -> dict:
    config = prepared.config
    report = steps_to_target(result.trace, config.target_accuracy)
    evals = [row for row in result.trace if row.event == "eval"]
    final_eval = evals[-1]
    full_mask = SparseMask.full(prepared.spec)
    return {
        "strategy": config.strategy,
        "seed": prepared.seed,
        "dataset_seed": prepared.dataset_seed,
        "partition_seed": prepared.partition_seed,
        "target_accuracy": config.target_accuracy,
        "max_steps": config.max_steps,
        "reached": report.reached,
        "oscillating": report.oscillating,
        "steps_to_target": report.steps_to_target,
        "sim_time_to_target_s": report.sim_time_to_target_s,
        "final_step": result.step,
        "final_sim_time_s": result.sim_time_s,
        "final_accuracy": final_eval.accuracy,
        "final_loss": final_eval.loss,
        "version": result.version,
        "aggregations": result.aggregation_count,
        "upload_events": result.upload_events,
        "download_events": result.download_events,
        "upload_bytes": result.upload_bytes,
        "download_bytes": result.download_bytes,
        "mean_upload_payload_bytes": (
            result.upload_bytes / result.upload_events if result.upload_events else 0.0
        ),
        "mask_mode": config.resolved_mask_mode(),
        "mask_density": prepared.mask.density(prepared.spec),
        "selected_values": prepared.mask.selected_value_count(prepared.spec),
        "peak_client_memory_bytes": memory_cost(
            prepared.mask, prepared.spec, prepared.memory_model
        ),
        "full_model_memory_bytes": memory_cost(
            full_mask, prepared.spec, prepared.memory_model
        ),
    }


def run_experiment(
    config: ExperimentConfig,
    out_dir,
    seed: int | None = None,
    plots: bool = True,
) -> dict:
    """Execute one run and write trace.csv, summary.json, resolved_config.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared = prepare_experiment(config, seed=seed)
    result = simulate(prepared)
    summary = summarize(prepared, result)
    write_trace_csv(result.trace, out / "trace.csv")
    resolved = config.to_dict()
    resolved["seed"] = prepared.seed
    (out / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if plots:
        from . import plots as plotmod

        plotmod.convergence_figure(
            result.trace, config.target_accuracy, out / "convergence.png"
        )
    return summary
