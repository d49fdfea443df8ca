"""Deterministic simulator for sparse semi-asynchronous federated learning.

The package splits into five layers, each usable on its own: a float32 MLP
training core (``nn``), synthetic data and Dirichlet partitioning (``data``),
memory-budgeted sparse parameter selection (``sparse``), the staleness-aware
aggregation protocol (``protocol``), and the discrete-event network simulator
(``sim``). ``config``/``runner``/``report``/``cli`` wire those into a
reproducible experiment front end.
"""

from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .data import (
    LabeledDataset,
    Partition,
    PartitionSpec,
    dirichlet_partition,
    label_distribution,
    load_dataset_file,
    make_blobs,
    save_dataset_file,
    split_dataset,
    tv_distance,
)
from .nn import (
    Batch,
    ModelSpec,
    ParamSet,
    evaluate,
    forward,
    init_params,
    loss_and_grad,
    params_equal,
    sgd_step,
)
from .protocol import (
    AggregationReport,
    ClientUpdate,
    ServerState,
    aggregate_fedbuff,
    aggregate_ftte,
    aggregate_sync,
    apply_async,
    client_local_train,
    staleness_weight,
)
from .rng import derive_seed, make_rng
from .runner import prepare_experiment, run_experiment
from .sim import (
    ClientProfile,
    SimConfig,
    SimResult,
    TraceRow,
    read_trace_csv,
    run_simulation,
    sample_job_time,
    steps_to_target,
    write_trace_csv,
)
from .sparse import (
    DeviceProfile,
    MemoryModel,
    SparseDelta,
    SparseMask,
    decode_delta,
    encode_delta,
    estimate_contribution,
    extract_delta,
    memory_cost,
    select_parameters,
)

__version__ = "0.1.0"

__all__ = [
    "AggregationReport",
    "Batch",
    "ClientProfile",
    "ClientUpdate",
    "ConfigError",
    "DeviceProfile",
    "ExperimentConfig",
    "LabeledDataset",
    "MemoryModel",
    "ModelSpec",
    "ParamSet",
    "Partition",
    "PartitionSpec",
    "ServerState",
    "SimConfig",
    "SimResult",
    "SparseDelta",
    "SparseMask",
    "TraceRow",
    "aggregate_fedbuff",
    "aggregate_ftte",
    "aggregate_sync",
    "apply_async",
    "apply_overrides",
    "client_local_train",
    "decode_delta",
    "derive_seed",
    "dirichlet_partition",
    "encode_delta",
    "estimate_contribution",
    "evaluate",
    "extract_delta",
    "forward",
    "init_params",
    "label_distribution",
    "load_config",
    "load_dataset_file",
    "loss_and_grad",
    "make_blobs",
    "make_rng",
    "memory_cost",
    "params_equal",
    "prepare_experiment",
    "read_trace_csv",
    "run_experiment",
    "run_simulation",
    "sample_job_time",
    "save_dataset_file",
    "select_parameters",
    "sgd_step",
    "split_dataset",
    "staleness_weight",
    "steps_to_target",
    "tv_distance",
    "write_trace_csv",
]
