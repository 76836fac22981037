"""Run configuration: one YAML file describes one reproducible experiment.

Every section maps onto a frozen dataclass; unknown keys are rejected before
anything runs, and `dump_config(load_config(text))` is a fixed point.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .calibration import RULES
from .latency import SERVICE_DISTS

SWEEP_PARAMETERS = ("alpha", "tau_scale", "lambda_cost", "lambda_quality", "cost_ratio",
                    "shift")
ORDERED_SWEEPS = SWEEP_PARAMETERS  # every sweep parameter is numeric and ordered


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadSection:
    n_train: int = 6000
    n_calib: int = 6000
    n_test: int = 10000
    feature_dim: int = 8
    feature_noise: float = 0.15
    token_sigma: float = 0.5
    tau_scale: float = 1.0
    shift_kind: str = "none"  # applied to the test split only
    shift_magnitude: float = 0.0

    def __post_init__(self):
        if min(self.n_train, self.n_calib, self.n_test) < 1:
            raise ConfigError("workload sizes must be >= 1")
        if self.tau_scale <= 0:
            raise ConfigError("tau_scale must be > 0")
        if self.shift_kind not in ("none", "difficulty_shift", "domain_shift",
                                   "task_mix_shift"):
            raise ConfigError(f"unknown shift_kind {self.shift_kind!r}")


@dataclass(frozen=True)
class PortfolioSection:
    costs: tuple[float, ...] = (0.01, 0.10, 0.80, 8.00)
    capabilities: tuple[float, ...] = (0.35, 0.55, 0.75, 0.95)
    workers: tuple[int, ...] = (8, 4, 4, 1)
    service_ms: tuple[float, ...] = (15.0, 40.0, 100.0, 400.0)
    top_rate_limit: float = 60.0
    top_burst: float = 60.0

    def __post_init__(self):
        sizes = {len(self.costs), len(self.capabilities), len(self.workers),
                 len(self.service_ms)}
        if len(sizes) != 1:
            raise ConfigError("portfolio lists must have equal length")


@dataclass(frozen=True)
class RouterSection:
    lambda_cost: float = 0.3
    lambda_quality: float = 0.5
    learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 60
    patience: int = 3
    val_fraction: float = 0.2
    embed_dim: int = 8
    hidden_dim: int = 32


@dataclass(frozen=True)
class CalibrationSection:
    alpha: float = 0.05
    rule: str = "risk_control"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.rule not in RULES:
            raise ConfigError(f"unknown threshold rule {self.rule!r}")


@dataclass(frozen=True)
class CooptSection:
    epsilon: float = 0.005
    max_iterations: int = 10
    eta: float = 0.6
    top_n: int = 5
    candidate_ks: tuple[int, ...] = (5, 10, 20)
    hard_fraction: float = 0.3
    replay_fraction: float = 0.2
    radius_quantile: float = 0.9
    targeting: str = "clustered"


@dataclass(frozen=True)
class LatencySection:
    arrival_rates: tuple[float, ...] = (1000.0, 2000.0, 5000.0, 10000.0, 20000.0)
    reference_rate: float = 1000.0
    duration_s: float = 300.0
    warmup_s: float = 30.0
    service_dist: str = "exponential"
    service_sigma: float = 1.0

    def __post_init__(self):
        if self.service_dist not in SERVICE_DISTS:
            raise ConfigError(f"unknown service_dist {self.service_dist!r}")
        if not 0 <= self.warmup_s < self.duration_s:
            raise ConfigError("need 0 <= warmup_s < duration_s")
        if not self.arrival_rates or min(self.arrival_rates) <= 0:
            raise ConfigError("arrival_rates must be nonempty and positive")


@dataclass(frozen=True)
class SweepSpec:
    parameter: str = "alpha"
    values: tuple[float, ...] = (0.01, 0.03, 0.05, 0.10, 0.15)

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMETERS:
            raise ConfigError(f"unknown sweep parameter {self.parameter!r}")
        if not self.values:
            raise ConfigError("sweep values must be nonempty")
        if self.parameter in ORDERED_SWEEPS and \
                any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ConfigError(f"sweep values for {self.parameter} must be strictly increasing")
        if self.parameter == "cost_ratio" and min(self.values) <= 0:
            raise ConfigError("cost multipliers must be > 0")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    policies: tuple[str, ...] = ("routed", "no_cascade", "always_t4", "always_t2", "random",
                                 "rule_based")
    workload: WorkloadSection = field(default_factory=WorkloadSection)
    portfolio: PortfolioSection = field(default_factory=PortfolioSection)
    router: RouterSection = field(default_factory=RouterSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    coopt: CooptSection = field(default_factory=CooptSection)
    latency: LatencySection = field(default_factory=LatencySection)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def __post_init__(self):
        known = {"routed", "no_cascade", "always_t4", "always_t2", "random", "rule_based"}
        bad = sorted(set(self.policies) - known)
        if bad:
            raise ConfigError(f"unknown policies {bad}")


def _coerce(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        (inner, _) = typing.get_args(tp)
        return tuple(_coerce(inner, v, where) for v in value)
    if origin in (typing.Union, types.UnionType):
        if value is None:
            return None
        inner = [a for a in typing.get_args(tp) if a is not type(None)][0]
        return _coerce(inner, value, where)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: Any, where: str = "config"):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def to_dict(obj) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    return plain(dataclasses.asdict(obj))


def load_config(source: str | Path | None) -> RunConfig:
    """Parse a YAML file (or the defaults when `source` is None)."""
    if source is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(source).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not valid YAML ({exc})") from exc
    return from_dict(RunConfig, data)


def parse_config(text: str) -> RunConfig:
    return from_dict(RunConfig, yaml.safe_load(text))


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=False)


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
