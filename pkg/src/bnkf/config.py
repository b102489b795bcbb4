"""Run configuration: a JSON document with every field defaulted.

A run manifest embeds the fully defaulted config under ``"config"``, so a manifest
can be passed back wherever a config file is accepted.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .bnn import ARCHITECTURE, TrainConfig
from .evalkit import METHODS, Q_GRID
from .simkit import NOISE_TIERS_DEG, SAMPLING_RATES, SimulationConfig, TrajectoryParams

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class FilterSettings:
    # "tune" selects q per method and tier by grid search on the validation set
    q: dict = field(default_factory=lambda: {"EKF": "tune", "UKF": "tune"})
    q_grid: list = field(default_factory=lambda: list(Q_GRID))
    kappa: float = 0.0


@dataclass
class BnnSettings:
    epochs: int = TrainConfig.epochs
    lr: float = TrainConfig.lr
    batch_size: int = TrainConfig.batch_size
    beta: float = TrainConfig.beta
    prior_sigma: float = TrainConfig.prior_sigma
    rho_init: float = TrainConfig.rho_init
    activation: str = TrainConfig.activation
    hidden: list = field(default_factory=lambda: list(ARCHITECTURE))
    mc_samples: int = 100

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr, self.batch_size, self.beta, seed,
                           self.prior_sigma, self.rho_init, self.activation, tuple(self.hidden))


@dataclass
class TimingSettings:
    traj_id: int = 0
    rate: float = 1.0
    repeats: int = 5


@dataclass
class PathSettings:
    data: str = "data"
    models: str = "models"
    reports: str = "reports"


@dataclass
class RunConfig:
    seed: int = 0
    tiers: list = field(default_factory=lambda: list(NOISE_TIERS_DEG))
    rates: list = field(default_factory=lambda: list(SAMPLING_RATES))
    n_trajectories: int = 500
    n_validation: int = 20
    folds: int = 5
    sensor: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    trajectory: TrajectoryParams = field(default_factory=TrajectoryParams)
    filter: FilterSettings = field(default_factory=FilterSettings)
    bnn: BnnSettings = field(default_factory=BnnSettings)
    methods: list = field(default_factory=lambda: list(METHODS))
    timing: TimingSettings = field(default_factory=TimingSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    def validate(self) -> "RunConfig":
        bad = [t for t in self.tiers if t not in NOISE_TIERS_DEG]
        if bad or not self.tiers:
            raise ConfigError(f"unknown noise tiers {bad}; choose from {list(NOISE_TIERS_DEG)}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if any(not 0 < float(r) <= 1 for r in self.rates):
            raise ConfigError("sampling rates must lie in (0, 1]")
        if self.folds < 2:
            raise ConfigError(f"cross-validation needs at least 2 folds, got {self.folds}")
        if self.n_trajectories < self.folds:
            raise ConfigError(f"{self.n_trajectories} trajectories cannot fill {self.folds} folds")
        for m, q in self.filter.q.items():
            if m not in ("EKF", "UKF"):
                raise ConfigError(f"filter q given for unknown filter {m!r}")
            if q != "tune" and not (isinstance(q, (int, float)) and q > 0):
                raise ConfigError(f"q for {m} must be 'tune' or a positive number, got {q!r}")
        if len(self.sensor) != 3:
            raise ConfigError("sensor must be a 3-vector")
        return self

    def simulation(self) -> SimulationConfig:
        return SimulationConfig(self.n_trajectories, self.n_validation, tuple(self.sensor),
                                tuple(self.rates), self.folds, self.trajectory)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trajectory"] = {k: list(v) if isinstance(v, tuple) else v
                           for k, v in d["trajectory"].items()}
        return d


_SECTIONS = {"trajectory": TrajectoryParams, "filter": FilterSettings, "bnn": BnnSettings,
             "timing": TimingSettings, "paths": PathSettings}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for k, v in data.items():
        if cls is RunConfig and k in _SECTIONS:
            v = _build(_SECTIONS[k], v, f"{k}.")
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from None


def from_dict(data: dict) -> RunConfig:
    data = copy.deepcopy(data)
    if "config" in data and "manifest_version" in data:
        data = data["config"]
    data.pop("version", None)
    return _build(RunConfig, data, "").validate()


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return from_dict(data)


def dumps(cfg: RunConfig) -> str:
    return json.dumps({"version": CONFIG_VERSION, **cfg.to_dict()}, indent=2, sort_keys=True) + "\n"
