"""Experiment configuration: one flat JSON document, schema-validated.

Every run is fully described by an ``ExperimentConfig``; the resolved form
(with all defaults materialized) is written next to the outputs so any run
can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .protocol import AGE_MODES, STRATEGIES
from .sim import DELAY_MODES, SimConfig

MASK_MODES = ("sparse", "full", "last_layer")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # protocol and scheduling
    strategy: str = "ftte"
    num_clients: int = 100
    buffer_size: int | None = None
    straggler_fraction: float = 0.5
    straggler_delay_max_s: float = 30.0
    base_compute_time_s: float = 1.0
    delay_mode: str = "uniform"
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
    seed: int = 1
    repeats: int = 3
    # synthetic dataset
    num_classes: int = 2
    input_dim: int = 20
    samples_per_class: int = 2000
    class_separation: float = 4.0
    noise_sigma: float = 1.0
    test_fraction: float = 0.2
    calibration_fraction: float = 0.1
    # partition
    alpha: float = 1.0
    min_samples_per_client: int = 8
    # model and parameter selection
    hidden_dims: tuple[int, ...] = (32,)
    mask_mode: str | None = None  # resolved per strategy when omitted
    budget_bytes: int | None = None
    calibration_batches: int = 8
    calibration_batch_size: int = 32
    optimizer_state_multiplier: int = 0

    def resolved_mask_mode(self) -> str:
        if self.mask_mode is not None:
            return self.mask_mode
        return "sparse" if self.strategy in ("ftte", "fedbuff") else "full"

    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    def to_sim_config(self, seed: int | None = None) -> SimConfig:
        return SimConfig(
            strategy=self.strategy,
            num_clients=self.num_clients,
            seed=self.seed if seed is None else seed,
            straggler_fraction=self.straggler_fraction,
            straggler_delay_max_s=self.straggler_delay_max_s,
            base_compute_time_s=self.base_compute_time_s,
            delay_mode=self.delay_mode,
            buffer_size=self.buffer_size,
            local_epochs=self.local_epochs,
            lr=self.lr,
            batch_size=self.batch_size,
            target_accuracy=self.target_accuracy,
            max_steps=self.max_steps,
            eval_every_aggregations=self.eval_every_aggregations,
            eval_batch_size=self.eval_batch_size,
            count_downloads=self.count_downloads,
            age_mode=self.age_mode,
            sample_weighted_buffering=self.sample_weighted_buffering,
            async_mixing_rate=self.async_mixing_rate,
            fedbuff_staleness_exponent=self.fedbuff_staleness_exponent,
            workers=self.workers,
        )

    def to_dict(self) -> dict:
        raw = dataclasses.asdict(self)
        raw["hidden_dims"] = list(self.hidden_dims)
        return raw


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}

_INT_KEYS = {
    "num_clients", "buffer_size", "local_epochs", "batch_size", "max_steps",
    "eval_every_aggregations", "eval_batch_size", "workers", "seed", "repeats",
    "num_classes", "input_dim", "samples_per_class", "min_samples_per_client",
    "budget_bytes", "calibration_batches", "calibration_batch_size",
    "optimizer_state_multiplier",
}
_FLOAT_KEYS = {
    "straggler_fraction", "straggler_delay_max_s", "base_compute_time_s", "lr",
    "target_accuracy", "async_mixing_rate", "fedbuff_staleness_exponent",
    "class_separation", "noise_sigma", "test_fraction", "calibration_fraction",
    "alpha",
}
_BOOL_KEYS = {"count_downloads", "sample_weighted_buffering"}
_STR_KEYS = {"strategy", "delay_mode", "age_mode", "mask_mode"}
_LIST_KEYS = {"hidden_dims"}
_OPTIONAL_KEYS = {"buffer_size", "budget_bytes", "mask_mode"}


def _coerce(key: str, value):
    if value is None and key in _OPTIONAL_KEYS:
        return None
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"key {key!r} expects a boolean, got {value!r}")
        return value
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key {key!r} expects an integer, got {value!r}")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key {key!r} expects a number, got {value!r}")
        return float(value)
    if key in _STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(f"key {key!r} expects a string, got {value!r}")
        return value
    if key in _LIST_KEYS:
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in value
        ):
            raise ConfigError(f"key {key!r} expects a list of positive integers")
        return tuple(value)
    raise ConfigError(f"unknown config key {key!r}")


def build_config(raw: dict) -> ExperimentConfig:
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {key: _coerce(key, value) for key, value in raw.items()}
    config = ExperimentConfig(**values)
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig) -> None:
    if config.strategy not in STRATEGIES:
        raise ConfigError(
            f"strategy must be one of {STRATEGIES}, got {config.strategy!r}"
        )
    if config.strategy in ("ftte", "fedbuff") and config.buffer_size is None:
        raise ConfigError(
            f"strategy {config.strategy!r} requires the key 'buffer_size'"
        )
    mode = config.resolved_mask_mode()
    if mode not in MASK_MODES:
        raise ConfigError(f"mask_mode must be one of {MASK_MODES}, got {mode!r}")
    if mode == "sparse" and config.budget_bytes is None:
        raise ConfigError("mask_mode 'sparse' requires the key 'budget_bytes'")
    if config.age_mode not in AGE_MODES:
        raise ConfigError(f"age_mode must be one of {AGE_MODES}")
    if config.delay_mode not in DELAY_MODES:
        raise ConfigError(f"delay_mode must be one of {DELAY_MODES}")
    for key in ("num_classes", "input_dim", "samples_per_class", "repeats",
                "calibration_batches", "calibration_batch_size",
                "min_samples_per_client"):
        if getattr(config, key) < 1:
            raise ConfigError(f"key {key!r} must be >= 1")
    if config.num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    for key in ("test_fraction", "calibration_fraction"):
        if not 0.0 < getattr(config, key) < 1.0:
            raise ConfigError(f"key {key!r} must lie in (0, 1)")
    if config.test_fraction + config.calibration_fraction >= 1.0:
        raise ConfigError("test and calibration fractions must sum below 1")
    if config.alpha <= 0:
        raise ConfigError("alpha must be > 0")
    if config.optimizer_state_multiplier < 0:
        raise ConfigError("optimizer_state_multiplier must be >= 0")
    if config.budget_bytes is not None and config.budget_bytes < 1:
        raise ConfigError("budget_bytes must be >= 1")
    # scheduling and numeric ranges are enforced by the simulator config
    try:
        config.to_sim_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}"
        ) from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return build_config(raw)


def parse_override(text: str) -> tuple[str, object]:
    """Parse one ``--set key=value`` item using the key's schema type."""
    key, sep, literal = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    literal = literal.strip()
    if literal.lower() in ("null", "none") and key in _OPTIONAL_KEYS:
        return key, None
    if key in _BOOL_KEYS:
        if literal.lower() in ("true", "1", "yes"):
            return key, True
        if literal.lower() in ("false", "0", "no"):
            return key, False
        raise ConfigError(f"key {key!r} expects true/false, got {literal!r}")
    if key in _INT_KEYS:
        try:
            return key, int(literal)
        except ValueError as exc:
            raise ConfigError(f"key {key!r} expects an integer, got {literal!r}") from exc
    if key in _FLOAT_KEYS:
        try:
            return key, float(literal)
        except ValueError as exc:
            raise ConfigError(f"key {key!r} expects a number, got {literal!r}") from exc
    if key in _LIST_KEYS:
        try:
            parts = json.loads(literal) if literal.startswith("[") else [
                int(p) for p in literal.split(",") if p
            ]
        except (ValueError, json.JSONDecodeError) as exc:
            raise ConfigError(f"key {key!r} expects a list of integers") from exc
        return key, parts
    return key, literal


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    raw = config.to_dict()
    for item in overrides:
        key, value = parse_override(item)
        raw[key] = value
    return build_config(raw)
