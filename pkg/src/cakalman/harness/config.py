"""Declarative experiment configuration loaded from YAML.

Unknown keys are rejected so that typos fail before any computation starts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

METHODS = ("cakf", "caks", "kf", "rts", "enkf", "etkf_s", "etkf_l")
STOCHASTIC = ("enkf", "etkf_s", "etkf_l")
POLICIES = ("cg_residual", "coordinate", "random_gaussian")


class ConfigError(ValueError):
    pass


@dataclass
class TemporalConfig:
    nu: float = 1.5
    lengthscale: float = 0.5
    output_scale: float = 1.0


@dataclass
class SpatialConfig:
    nu: float = 1.5
    lengthscale: float = 0.5
    geometry: str = "euclidean"
    dim: int = 1
    radius: float = 1.0


@dataclass
class ModelConfig:
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    spatial: SpatialConfig = field(default_factory=SpatialConfig)
    noise_std: float = 0.1


@dataclass
class DataConfig:
    kind: str = "onmodel"
    seed: int = 0
    seeds: list | None = None
    path: str | None = None
    # on-model grid
    domain: list = field(default_factory=lambda: [0.0, 20.0])
    n_space: int = 100
    horizon: float = 5.0
    steps_per_unit: int = 20
    n_train_times: int | None = None
    n_train_space: int = 20
    fixed_train_times: bool = False
    # synthetic grid (time x space)
    train_grid: list = field(default_factory=lambda: [11, 16])
    eval_grid: list = field(default_factory=lambda: [51, 158])
    time_domain: list = field(default_factory=lambda: [0.0, 1.0])
    space_domain: list = field(default_factory=lambda: [0.0, 3.141592653589793])
    holdout_fraction: float | None = None

    def seed_list(self) -> list:
        return [int(s) for s in (self.seeds if self.seeds is not None else [self.seed])]


@dataclass
class SolverConfig:
    method: str = "cakf"
    methods: list | None = None
    policy: str = "cg_residual"
    policy_seed: int | None = None
    rank: int | None = 32
    ranks: list | None = None
    atol: float = 0.0
    rtol: float = 1e-10
    truncation_rank: int | None = None
    no_truncation: bool = False
    n_samples: int = 1

    def rank_list(self) -> list:
        if self.ranks is not None:
            return [int(r) for r in self.ranks]
        return [None if self.rank is None else int(self.rank)]


@dataclass
class OutputConfig:
    dir: str = "results"
    format: str = "csv"
    per_step: bool = False
    trajectories: bool = False


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


_NESTED = {
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "solver"): SolverConfig,
    (ExperimentConfig, "output"): OutputConfig,
    (ModelConfig, "temporal"): TemporalConfig,
    (ModelConfig, "spatial"): SpatialConfig,
}


def _positive(value, name):
    try:
        ok = float(value) > 0
    except (TypeError, ValueError):
        ok = False
    if not ok:
        raise ConfigError(f"{name} must be positive, got {value!r}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    m, d, s, o = cfg.model, cfg.data, cfg.solver, cfg.output
    if float(m.temporal.nu) not in (0.5, 1.5, 2.5) or float(m.spatial.nu) not in (0.5, 1.5, 2.5):
        raise ConfigError("Matern smoothness must be one of 0.5, 1.5, 2.5")
    for name, value in [("model.temporal.lengthscale", m.temporal.lengthscale),
                        ("model.spatial.lengthscale", m.spatial.lengthscale)]:
        _positive(value, name)
    if float(m.temporal.output_scale) < 0:
        raise ConfigError("model.temporal.output_scale must be nonnegative")
    if float(m.noise_std) < 0:
        raise ConfigError("model.noise_std must be nonnegative")
    if m.spatial.geometry not in ("euclidean", "sphere"):
        raise ConfigError("model.spatial.geometry must be 'euclidean' or 'sphere'")
    if d.kind not in ("onmodel", "synthetic", "file"):
        raise ConfigError("data.kind must be one of onmodel, synthetic, file")
    if d.kind == "file" and not d.path:
        raise ConfigError("data.path is required when data.kind is 'file'")
    if d.kind == "onmodel":
        if m.spatial.geometry != "euclidean" or int(m.spatial.dim) not in (1, 2):
            raise ConfigError("on-model data needs a 1-D or 2-D euclidean domain")
        for name in ("n_space", "horizon", "steps_per_unit", "n_train_space"):
            _positive(getattr(d, name), f"data.{name}")
        if d.n_train_times is not None:
            _positive(d.n_train_times, "data.n_train_times")
        if not float(d.domain[1]) > float(d.domain[0]):
            raise ConfigError("data.domain must be an increasing pair")
    if d.kind == "synthetic" and (m.spatial.geometry != "euclidean" or int(m.spatial.dim) != 1):
        raise ConfigError("synthetic data needs a 1-D euclidean domain")
    if d.holdout_fraction is not None and not 0 < float(d.holdout_fraction) < 1:
        raise ConfigError("data.holdout_fraction must lie in (0, 1)")
    for grid in ("train_grid", "eval_grid"):
        g = getattr(d, grid)
        if len(g) != 2 or min(int(v) for v in g) < 2:
            raise ConfigError(f"data.{grid} must be two sizes >= 2")
    methods = s.methods if s.methods is not None else [s.method]
    for meth in methods:
        if meth not in METHODS:
            raise ConfigError(f"unknown method {meth!r}; expected one of {METHODS}")
    if s.policy not in POLICIES:
        raise ConfigError(f"unknown policy {s.policy!r}; expected one of {POLICIES}")
    if s.policy == "random_gaussian" and s.policy_seed is None:
        raise ConfigError("solver.policy_seed is required for the random_gaussian policy")
    for r in s.rank_list():
        if r is not None and int(r) < 0:
            raise ConfigError("ranks must be nonnegative")
    if any(meth in STOCHASTIC for meth in methods):
        if any(r is None or int(r) < 1 for r in s.rank_list()):
            raise ConfigError("ensemble methods need positive ranks (ensemble sizes)")
        if d.seeds is None and d.seed is None:
            raise ConfigError("ensemble methods need a seed")
    if o.format not in ("csv", "json"):
        raise ConfigError("output.format must be 'csv' or 'json'")
    return cfg


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, raw or {}, "config"))


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return config_from_dict({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    return config_from_dict(raw)
