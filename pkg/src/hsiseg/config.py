"""Experiment configuration: one YAML file, every field defaulted, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field

import yaml

from .backbone import NetworkConfig
from .synthdata import BenchmarkConfig, DomainSpec, PhantomSpec, default_domains


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    dir: str = "data/benchmark"
    master_seed: int = 0
    n_train: int = 200
    n_val: int = 40
    n_test: int = 80
    num_stages: int = 3
    domains: list[DomainSpec] = field(default_factory=default_domains)

    def benchmark(self) -> BenchmarkConfig:
        return BenchmarkConfig(self.master_seed, self.n_train, self.n_val, self.n_test, self.num_stages,
                               PhantomSpec(), list(self.domains))


@dataclass
class NetworkSection:
    base_width: int = 16
    depth: int = 2

    def build(self) -> NetworkConfig:
        return NetworkConfig(base_width=self.base_width, depth=self.depth)


@dataclass
class TrainingSection:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.1


@dataclass
class ScheduleSection:
    lambda0: float = 1.0
    k: float = 5.0
    alpha0: float = 0.1
    eta: float = 0.01
    decay: str = "scaled"


@dataclass
class MetricsSection:
    hd_percentile: float = 100.0
    spacing: float = 1.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    method: str = "hsi"
    out_dir: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        kwargs[name] = _coerce(hints[name], value, f"{where}.{name}" if where else name)
    return cls(**kwargs)


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent literals without a dot (1e-3) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp in (int, str, bool):
        if not isinstance(value, tp) or (tp is int and isinstance(value, bool)):
            raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    from .baselines import METHODS
    from .distill import ScheduleState

    if cfg.method not in METHODS:
        raise ConfigError(f"method: unknown {cfg.method!r}; valid choices: {', '.join(METHODS)}")
    d = cfg.data
    if min(d.n_train, d.n_val, d.n_test) < 1 or d.num_stages < 2:
        raise ConfigError("data: split sizes must be positive and num_stages >= 2")
    if len(d.domains) < d.num_stages:
        raise ConfigError(f"data: {d.num_stages} stages need as many domains, got {len(d.domains)}")
    t = cfg.training
    if t.epochs < 1 or t.batch_size < 1 or not t.lr > 0:
        raise ConfigError("training: epochs, batch_size and lr must be positive")
    s = cfg.schedule
    try:
        ScheduleState(0, 1, s.lambda0, s.k, s.alpha0, s.decay).validate()
        for dom in d.domains:
            dom.validate()
        cfg.network.build().validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not 0.0 < s.eta <= 1.0:
        raise ConfigError(f"schedule.eta must be in (0, 1], got {s.eta}")
    if not 0.0 < cfg.metrics.hd_percentile <= 100.0 or not cfg.metrics.spacing > 0:
        raise ConfigError("metrics: hd_percentile must be in (0, 100] and spacing positive")
    return cfg


def from_dict(raw: dict | None) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, raw or {}, ""))


def loads(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read())


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
