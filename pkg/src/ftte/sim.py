"""Deterministic discrete-event simulator of the federated network.

The event loop is a single logical thread that owns every piece of mutable
state. Client training jobs are pure functions of (snapshot, seed) and may be
farmed to a thread pool; their results are committed only when the clock
reaches their scheduled finish time, so the worker count changes wall-clock
speed and nothing else.

Step accounting: every model upload advances the communication-step counter
by one, and every model download does too unless ``count_downloads`` is off.
Aggregations and evaluations consume neither steps nor simulated time.
"""

from __future__ import annotations

import csv
import heapq
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from .data import LabeledDataset, Partition, client_loader
from .nn import ModelSpec, ParamSet, evaluate
from .protocol import (
    STRATEGIES,
    ServerState,
    aggregate_fedbuff,
    aggregate_ftte,
    aggregate_sync,
    apply_async,
    client_local_train,
    make_update,
    receive_update,
)
from .rng import derive_seed, make_rng
from .sparse import SparseMask, encode_delta, extract_delta

DELAY_MODES = ("uniform", "fixed")

TRACE_HEADER = "step,sim_time_s,event,version,accuracy,loss,upload_bytes_cum,download_bytes_cum"


class InvalidConfigError(ValueError):
    pass


class NoEvalsError(ValueError):
    pass


@dataclass(frozen=True)
class ClientProfile:
    client_id: int
    base_compute_time_s: float
    is_straggler: bool
    straggler_delay_max_s: float
    seed: int

    def __post_init__(self):
        if self.base_compute_time_s <= 0:
            raise InvalidConfigError("base_compute_time_s must be > 0")
        if self.straggler_delay_max_s < 0:
            raise InvalidConfigError("straggler_delay_max_s must be >= 0")


@dataclass(frozen=True)
class SimConfig:
    strategy: str
    num_clients: int
    seed: int
    straggler_fraction: float = 0.5
    straggler_delay_max_s: float = 30.0
    base_compute_time_s: float = 1.0
    delay_mode: str = "uniform"
    buffer_size: int | None = None
    local_epochs: int = 3
    lr: float = 0.1
    batch_size: int = 8
    target_accuracy: float = 0.9
    max_steps: int = 10_000
    eval_every_aggregations: int = 5
    eval_batch_size: int = 256
    count_downloads: bool = True
    age_mode: str = "received_step"
    sample_weighted_buffering: bool = False
    async_mixing_rate: float = 0.6
    fedbuff_staleness_exponent: float = 0.5
    workers: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidConfigError(f"unknown strategy {self.strategy!r}")
        if self.num_clients < 1:
            raise InvalidConfigError("num_clients must be >= 1")
        if not 0.0 <= self.straggler_fraction <= 1.0:
            raise InvalidConfigError("straggler_fraction must lie in [0, 1]")
        if self.delay_mode not in DELAY_MODES:
            raise InvalidConfigError(f"unknown delay_mode {self.delay_mode!r}")
        if self.strategy in ("ftte", "fedbuff"):
            if self.buffer_size is None or self.buffer_size < 1:
                raise InvalidConfigError(f"{self.strategy} requires buffer_size >= 1")
            if self.buffer_size > self.num_clients:
                raise InvalidConfigError("buffer_size cannot exceed num_clients")
        if self.local_epochs < 0 or self.max_steps < 0:
            raise InvalidConfigError("counts must be >= 0")
        if self.eval_every_aggregations < 1:
            raise InvalidConfigError("eval_every_aggregations must be >= 1")
        if self.workers < 1:
            raise InvalidConfigError("workers must be >= 1")


@dataclass(frozen=True)
class TraceRow:
    step: int
    sim_time_s: float
    event: str
    version: int
    accuracy: float | None
    loss: float | None
    upload_bytes_cum: int
    download_bytes_cum: int


@dataclass
class SimResult:
    trace: list[TraceRow]
    final_params: ParamSet
    reached_target: bool
    step: int
    sim_time_s: float
    version: int
    aggregation_count: int
    upload_events: int
    download_events: int
    upload_bytes: int
    download_bytes: int
    upload_payload_bytes: int
    download_payload_bytes: int


@dataclass(frozen=True)
class TargetReport:
    reached: bool
    steps_to_target: int | None
    sim_time_to_target_s: float | None
    oscillating: bool


def build_profiles(config: SimConfig) -> list[ClientProfile]:
    """Stragglers are a prefix of one seed-fixed permutation, so raising the
    fraction only ever adds stragglers without reshuffling the existing set."""
    order = make_rng(derive_seed(config.seed, "stragglers")).permutation(
        config.num_clients
    )
    count = int(round(config.num_clients * config.straggler_fraction))
    slow = set(int(c) for c in order[:count])
    return [
        ClientProfile(
            client_id=cid,
            base_compute_time_s=config.base_compute_time_s,
            is_straggler=cid in slow,
            straggler_delay_max_s=config.straggler_delay_max_s,
            seed=derive_seed(config.seed, "time", cid),
        )
        for cid in range(config.num_clients)
    ]


def sample_job_time(profile: ClientProfile, rng, delay_mode: str = "uniform") -> float:
    if not profile.is_straggler or profile.straggler_delay_max_s == 0.0:
        return profile.base_compute_time_s
    if delay_mode == "fixed":
        return profile.base_compute_time_s + profile.straggler_delay_max_s
    # uniform over (0, max]: flip the half-open side of rng.uniform
    delay = profile.straggler_delay_max_s - rng.uniform(0.0, profile.straggler_delay_max_s)
    return profile.base_compute_time_s + delay


def _frame_bytes(params: ParamSet, mask: SparseMask) -> int:
    return len(encode_delta(extract_delta(params, params, mask)))


@dataclass
class _Job:
    client_id: int
    base_version: int
    snapshot: ParamSet
    result: object  # Future or (params, num_samples)


class _Loop:
    def __init__(
        self,
        config: SimConfig,
        initial_params: ParamSet,
        mask: SparseMask,
        train: LabeledDataset,
        partition: Partition,
        test: LabeledDataset,
    ):
        if partition.num_clients != config.num_clients:
            raise InvalidConfigError(
                f"partition has {partition.num_clients} shards for "
                f"{config.num_clients} clients"
            )
        for cid in range(config.num_clients):
            if len(partition.shard(cid)) == 0:
                raise InvalidConfigError(f"client {cid} has an empty shard")
        spec = ModelSpec(layer_dims=initial_params.spec_dims(), init_seed=0)
        mask.validate_against(spec)
        self.config = config
        self.train = train
        self.partition = partition
        self.test = test
        self.mask = mask
        capacity = config.buffer_size if config.strategy in ("ftte", "fedbuff") else config.num_clients
        self.state = ServerState(
            global_params=initial_params.copy(),
            mask=mask,
            strategy=config.strategy,
            buffer_capacity=capacity,
        )
        self.profiles = build_profiles(config)
        self.time_rngs = [make_rng(p.seed) for p in self.profiles]
        self.upload_payload = _frame_bytes(initial_params, mask)
        # buffered strategies ship only the trainable tensors back down;
        # sync pushes the whole model every round
        if config.strategy == "sync":
            self.download_payload = _frame_bytes(initial_params, SparseMask.full(spec))
        else:
            self.download_payload = self.upload_payload
        self.now = 0.0
        self.upload_bytes = 0
        self.download_bytes = 0
        self.upload_events = 0
        self.download_events = 0
        self.aggregations = 0
        self.dispatch_counts = [0] * config.num_clients
        self.heap: list[tuple[float, int, int]] = []
        self.jobs: dict[int, _Job] = {}
        self.seq = 0
        self.rows: list[TraceRow] = []
        self.reached = False
        self.round_updates: list = []  # sync only
        self.idle: list[int] = []  # buffered only, in upload order
        self.pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None

    # -- bookkeeping -------------------------------------------------------

    def record(self, event: str, accuracy=None, loss=None) -> None:
        self.rows.append(
            TraceRow(
                step=self.state.step,
                sim_time_s=self.now,
                event=event,
                version=self.state.version,
                accuracy=accuracy,
                loss=loss,
                upload_bytes_cum=self.upload_bytes,
                download_bytes_cum=self.download_bytes,
            )
        )

    def do_eval(self) -> None:
        accuracy, loss = evaluate(
            self.state.global_params, self.test.iter_batches(self.config.eval_batch_size)
        )
        self.record("eval", accuracy=accuracy, loss=loss)
        if accuracy >= self.config.target_accuracy:
            self.reached = True

    def out_of_steps(self) -> bool:
        return self.state.step >= self.config.max_steps

    # -- client lifecycle --------------------------------------------------

    def dispatch(self, cid: int) -> None:
        if self.reached or self.out_of_steps():
            return
        config = self.config
        self.download_events += 1
        self.download_bytes += self.download_payload
        if config.count_downloads:
            self.state.step += 1
        self.record("dispatch")
        snapshot = self.state.global_params.copy()
        seed = derive_seed(config.seed, "train", cid, self.dispatch_counts[cid])
        self.dispatch_counts[cid] += 1
        loader = lambda epoch_seed, cid=cid: client_loader(
            self.train, self.partition, cid, config.batch_size, epoch_seed
        )
        job_fn = lambda: client_local_train(
            snapshot, self.mask, loader, config.local_epochs, config.lr, seed
        )
        job = _Job(
            client_id=cid,
            base_version=self.state.version,
            snapshot=snapshot,
            result=self.pool.submit(job_fn) if self.pool else job_fn(),
        )
        finish = self.now + sample_job_time(
            self.profiles[cid], self.time_rngs[cid], config.delay_mode
        )
        self.jobs[self.seq] = job
        heapq.heappush(self.heap, (finish, self.seq, cid))
        self.seq += 1

    def commit(self, seq: int) -> None:
        config = self.config
        job = self.jobs.pop(seq)
        local, num_samples = (
            job.result.result() if self.pool else job.result
        )
        self.upload_events += 1
        self.upload_bytes += self.upload_payload
        self.state.step += 1
        update = make_update(
            job.client_id,
            local,
            job.snapshot,
            self.mask,
            base_version=job.base_version,
            received_step=self.state.step,
            num_samples=num_samples,
        )
        self.record("client_finished")
        if config.strategy == "sync":
            self.round_updates.append(update)
            if len(self.round_updates) == config.num_clients:
                aggregate_sync(
                    self.state,
                    self.round_updates,
                    expected_ids=list(range(config.num_clients)),
                )
                self.round_updates = []
                self.after_aggregation()
                for cid in range(config.num_clients):
                    self.dispatch(cid)
        elif config.strategy == "async":
            apply_async(self.state, update, mixing_rate=config.async_mixing_rate)
            self.after_aggregation()
            self.dispatch(job.client_id)
        else:
            receive_update(self.state, update)
            self.idle.append(job.client_id)
            if len(self.state.buffer) == self.state.buffer_capacity:
                if config.strategy == "ftte":
                    aggregate_ftte(
                        self.state,
                        age_mode=config.age_mode,
                        sample_weighted=config.sample_weighted_buffering,
                    )
                else:
                    aggregate_fedbuff(
                        self.state,
                        exponent=config.fedbuff_staleness_exponent,
                        age_mode=config.age_mode,
                        sample_weighted=config.sample_weighted_buffering,
                    )
                self.after_aggregation()
                waiting, self.idle = self.idle, []
                for cid in waiting:
                    self.dispatch(cid)

    def after_aggregation(self) -> None:
        self.aggregations += 1
        self.record("aggregation")
        if self.aggregations % self.config.eval_every_aggregations == 0:
            self.do_eval()

    # -- main loop ---------------------------------------------------------

    def run(self) -> SimResult:
        try:
            self.do_eval()
            if not self.reached and not self.out_of_steps():
                for cid in range(self.config.num_clients):
                    self.dispatch(cid)
            while self.heap and not self.reached and not self.out_of_steps():
                finish, seq, _cid = heapq.heappop(self.heap)
                self.now = finish
                self.commit(seq)
        finally:
            if self.pool:
                self.pool.shutdown(wait=False, cancel_futures=True)
        return SimResult(
            trace=self.rows,
            final_params=self.state.global_params,
            reached_target=self.reached,
            step=self.state.step,
            sim_time_s=self.now,
            version=self.state.version,
            aggregation_count=self.aggregations,
            upload_events=self.upload_events,
            download_events=self.download_events,
            upload_bytes=self.upload_bytes,
            download_bytes=self.download_bytes,
            upload_payload_bytes=self.upload_payload,
            download_payload_bytes=self.download_payload,
        )


def run_simulation(
    config: SimConfig,
    initial_params: ParamSet,
    mask: SparseMask,
    train: LabeledDataset,
    partition: Partition,
    test: LabeledDataset,
) -> SimResult:
    return _Loop(config, initial_params, mask, train, partition, test).run()


def steps_to_target(trace: list[TraceRow], target_accuracy: float) -> TargetReport:
    evals = [row for row in trace if row.event == "eval"]
    if not evals:
        raise NoEvalsError("trace contains no eval records")
    reached_step = None
    reached_time = None
    for row in evals:
        if row.accuracy >= target_accuracy:
            reached_step = row.step
            reached_time = row.sim_time_s
            break
    losses = [row.loss for row in evals]
    quartile = losses[-max(1, len(losses) // 4):]
    mean = sum(quartile) / len(quartile)
    if mean > 0 and len(quartile) > 1:
        variance = sum((x - mean) ** 2 for x in quartile) / len(quartile)
        oscillating = math.sqrt(variance) / mean > 0.5
    else:
        oscillating = False
    return TargetReport(
        reached=reached_step is not None,
        steps_to_target=reached_step,
        sim_time_to_target_s=reached_time,
        oscillating=oscillating,
    )


def _fmt(value: float | None) -> str:
    return "" if value is None else format(value, ".6g")


def write_trace_csv(trace: list[TraceRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(TRACE_HEADER + "\n")
        for row in trace:
            fh.write(
                f"{row.step},{_fmt(row.sim_time_s)},{row.event},{row.version},"
                f"{_fmt(row.accuracy)},{_fmt(row.loss)},"
                f"{row.upload_bytes_cum},{row.download_bytes_cum}\n"
            )


def read_trace_csv(path) -> list[TraceRow]:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACE_HEADER.split(","):
            raise ValueError(f"unexpected trace header in {path}")
        for rec in reader:
            rows.append(
                TraceRow(
                    step=int(rec["step"]),
                    sim_time_s=float(rec["sim_time_s"]),
                    event=rec["event"],
                    version=int(rec["version"]),
                    accuracy=float(rec["accuracy"]) if rec["accuracy"] else None,
                    loss=float(rec["loss"]) if rec["loss"] else None,
                    upload_bytes_cum=int(rec["upload_bytes_cum"]),
                    download_bytes_cum=int(rec["download_bytes_cum"]),
                )
            )
    return rows
