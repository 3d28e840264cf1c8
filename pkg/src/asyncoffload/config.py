"""Declarative experiment configuration.

One YAML (or JSON) file maps onto :class:`ExperimentConfig`. Unknown keys
are rejected and ``dotted.key=value`` overrides are type-checked against
the same schema.
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

__all__ = [
    "AnalysisConfig",
    "AutotuneConfig",
    "ConfigError",
    "ExperimentConfig",
    "OptimizerConfig",
    "PipelineConfig",
    "ProfileConfig",
    "SelectionConfig",
    "WorkloadConfig",
    "apply_overrides",
    "config_hash",
    "load_config",
]


class ConfigError(ValueError):
    pass


@dataclass
class WorkloadConfig:
    kind: str = "logistic_regression"  # quadratic | logistic_regression | mlp2
    n_features: int = 100
    n_hidden: int = 32
    n_classes: int = 10
    n_outputs: int = 16  # quadratic only: rows of the parameter matrix
    n_samples: int = 4096
    batch_size: int = 32
    relevant_frac: float = 0.10
    relevant_scale: float = 4.0
    feature_sigma: float = 0.5
    weight_scale: float = 1.0
    init_scale: float = 0.0  # logistic only: std of initial weights (per unit of feature scale)
    curvature_sigma: float = 1.0  # quadratic only
    noise: float = 0.0  # quadratic only: std of additive gradient noise


@dataclass
class OptimizerConfig:
    kind: str = "adamw"  # sgd | adamw
    lr: float = 0.003
    schedule: str = "cosine"  # constant | cosine
    lr_warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    S: int = 4
    warmup_frac: float = 0.05
    synchronous: bool = False  # reference run: every coordinate updated every step


@dataclass
class SelectionConfig:
    k_channel_ratio: float = 0.10
    refresh_interval: int | None = None  # None -> optimizer.S
    ema_decay: float | None = None
    n_shards: int = 1
    element_frac: float = 0.01
    record_trace: bool = False
    trace_limit: int = 200
    trace_param: str | None = None


@dataclass
class AutotuneConfig:
    enabled: bool = False
    gamma: float = 1.0
    ema_decay: float = 0.9
    s_min: int = 1
    s_max: int = 8


@dataclass
class ProfileConfig:
    fp_ms: float = 45.0
    bp_ms: float = 2000.0
    cpu_update_ms: float = 4600.0
    model_bytes: float = 14e9
    pcie_bytes_per_s: float = 28e9
    n_layers: int = 32
    gpu_update_ms: float | None = None


@dataclass
class PipelineConfig:
    overlay: bool = True
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    schedules: list[str] = field(default_factory=lambda: [
        "SequentialOffload", "LayerwiseOverlap", "ZenFlowUnpipelined", "ZenFlowPipelined"])
    n_iters: int = 100
    S: int | None = None  # None -> optimizer.S
    k: float | None = None  # None -> selection.k_channel_ratio
    swap_bytes: float | None = None


@dataclass
class AnalysisConfig:
    beta: float = 0.6


@dataclass
class ExperimentConfig:
    seed: int = 0
    T: int = 2000
    eval_every: int | None = None  # None -> max(1, T // 50)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    autotune: AutotuneConfig = field(default_factory=AutotuneConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        return _build(cls, data or {}, "")

    def with_overrides(self, overrides) -> "ExperimentConfig":
        return apply_overrides(self, overrides)


_WORKLOADS = ("quadratic", "logistic_regression", "mlp2")
_SCHEDULES = ("SequentialOffload", "LayerwiseOverlap", "ZenFlowPipelined", "ZenFlowUnpipelined")


def validate(cfg: ExperimentConfig) -> None:
    w, o, s, a = cfg.workload, cfg.optimizer, cfg.selection, cfg.autotune
    checks = [
        (cfg.T >= 1, "T must be >= 1"),
        (cfg.eval_every is None or cfg.eval_every >= 1, "eval_every must be >= 1"),
        (w.kind in _WORKLOADS, f"workload.kind must be one of {_WORKLOADS}"),
        (min(w.n_features, w.n_hidden, w.n_classes, w.n_outputs, w.n_samples, w.batch_size) >= 1,
         "workload dimensions must be >= 1"),
        (w.n_classes >= 2 or w.kind == "quadratic", "classification needs n_classes >= 2"),
        (0.0 < w.relevant_frac <= 1.0, "workload.relevant_frac must be in (0, 1]"),
        (o.kind in ("sgd", "adamw"), "optimizer.kind must be sgd or adamw"),
        (o.schedule in ("constant", "cosine"), "optimizer.schedule must be constant or cosine"),
        (o.lr > 0, "optimizer.lr must be > 0"),
        (o.S >= 1, "optimizer.S must be >= 1"),
        (0.0 <= o.warmup_frac <= 1.0, "optimizer.warmup_frac must be in [0, 1]"),
        (0.0 < s.k_channel_ratio <= 1.0, "selection.k_channel_ratio must be in (0, 1]"),
        (s.refresh_interval is None or s.refresh_interval >= 1, "selection.refresh_interval must be >= 1"),
        (s.ema_decay is None or 0.0 <= s.ema_decay < 1.0, "selection.ema_decay must be in [0, 1)"),
        (s.n_shards >= 1, "selection.n_shards must be >= 1"),
        (0.0 < s.element_frac <= 1.0, "selection.element_frac must be in (0, 1]"),
        (a.gamma > 0, "autotune.gamma must be > 0"),
        (1 <= a.s_min <= a.s_max, "autotune needs 1 <= s_min <= s_max"),
        (all(k in _SCHEDULES for k in cfg.pipeline.schedules), f"pipeline.schedules must be from {_SCHEDULES}"),
        (0.0 < cfg.analysis.beta < 1.0, "analysis.beta must be in (0, 1)"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def _hints(cls):
    return typing.get_type_hints(cls)


def _strip_optional(tp):
    args = typing.get_args(tp)
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


def _coerce(tp, value, where: str):
    base, optional = _strip_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where}: null is not allowed")
    if dataclasses.is_dataclass(base):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(base, value, where)
    origin = typing.get_origin(base)
    if origin is list:
        (item_tp,) = typing.get_args(base)
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_coerce(item_tp, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if base is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if base is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if base is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if base is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _build(cls, data: dict, prefix: str):
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{prefix}." if prefix else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name in names:
        if name in data:
            kwargs[name] = _coerce(hints[name], data[name], f"{prefix}.{name}" if prefix else name)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Return a new config with ``"a.b=value"`` overrides applied (YAML-parsed values)."""
    data = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        try:
            node[parts[-1]] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value for {key}: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = ExperimentConfig.from_dict(data or {})
    return apply_overrides(cfg, overrides) if overrides else cfg


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def schema_reference() -> dict[str, Any]:
    """Every key with its default, as nested dicts (for documentation)."""
    return ExperimentConfig().to_dict()
