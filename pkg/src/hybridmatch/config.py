"""Flat dotted-key configuration: defaults, profiles, file, env and flags."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from .decision import GridSpec, TrainParams
from .market import LogNormalParams, MarketConfig

SEED_ENV = "HYBRIDMATCH_SEED"


class ConfigError(ValueError):
    pass


PROFILES: dict[str, dict[str, object]] = {
    "desk": {"market.T": 50.0, "market.T0": 25.0},
    "paper": {"market.T": 100.0, "market.T0": 50.0},
}

DEFAULTS: dict[str, object] = {
    "market.lambda": 100.0,
    "market.d": 8.0,
    "market.p": None,
    "market.T": 50.0,
    "market.T0": 25.0,
    "market.mu": -0.8,
    "market.sigma": 0.3,
    "hybrid.tau": 0.10,
    "hybrid.w": 0.3,
    "hybrid.model": None,
    "hybrid.min_samples": 2,
    "hybrid.sample_source": "reported",
    "hybrid.initial_policy": "patient",
    "experiment.policy": "greedy,patient",
    "experiment.k": 10,
    "experiment.seed": 20240101,
    "experiment.workers": 1,
    "experiment.usage_start": None,
    "sweep.axis": "none",
    "sweep.values": "",
    "output.path": "-",
    "grid.mu_min": -2.0,
    "grid.mu_max": 2.0,
    "grid.mu_step": 0.2,
    "grid.sigma_min": 0.05,
    "grid.sigma_max": 2.0,
    "grid.sigma_step": 0.05,
    "calibrate.k": 10,
    "train.hidden": "16,16",
    "train.lr": 0.05,
    "train.epochs": 20000,
    "train.holdout": 0.2,
    "train.mode": "regress",
    "train.tau": 0.10,
    "train.seed": 0,
    "heatmap.taus": "0.01,0.1,0.15",
    "heatmap.dataset": None,
    "schedule.start": None,
    "schedule.end": None,
}

AXES = ("none", "d", "tau", "w", "grid")


_OPTIONAL_FLOATS = {"market.p", "experiment.usage_start", "schedule.start", "schedule.end"}


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if value is None or isinstance(value, str) and value.strip().lower() in ("none", "null"):
        return None
    if key in _OPTIONAL_FLOATS or isinstance(default, float):
        return float(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def load_settings(path: str | Path | None = None, profile: str | None = None,
                  overrides: dict[str, object] | None = None, env: dict[str, str] | None = None) -> dict:
    """Resolve settings: defaults < profile < file < environment < overrides."""
    env = os.environ if env is None else env
    settings = dict(DEFAULTS)
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        settings.update(PROFILES[profile])
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping of dotted keys")
        for k, v in _flatten(data).items():
            _set(settings, k, v)
    if env.get(SEED_ENV):
        _set(settings, "experiment.seed", env[SEED_ENV])
    for k, v in (overrides or {}).items():
        if v is not None:
            _set(settings, k, v)
    return settings


def _flatten(data: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _set(settings: dict, key: str, value):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown setting {key!r}")
    try:
        settings[key] = _coerce(key, value)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {value!r}") from e


def parse_list(value, cast=float) -> list:
    if value is None or value == "":
        return []
    if isinstance(value, (list, tuple)):
        return [cast(v) for v in value]
    if isinstance(value, (int, float)):
        return [cast(value)]
    return [cast(v.strip()) for v in str(value).split(",") if v.strip()]


# where output goes does not change what is computed
_UNFINGERPRINTED = {"output.path", "experiment.workers"}


def fingerprint(settings: dict) -> str:
    keep = {k: settings[k] for k in sorted(settings) if k not in _UNFINGERPRINTED}
    blob = json.dumps(keep, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ExperimentConfig:
    market: MarketConfig
    policies: tuple[str, ...]
    k: int
    seed: int
    axis: str
    values: tuple
    output: str
    tau: float
    w: float
    model_path: str | None
    min_samples: int = 2
    sample_source: str = "reported"
    initial_policy: str = "patient"
    workers: int = 1
    usage_start: float | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("experiment.k must be >= 1")
        if self.axis not in AXES:
            raise ConfigError(f"sweep.axis must be one of {AXES}, got {self.axis!r}")
        for pol in self.policies:
            if pol not in ("greedy", "patient", "hybrid"):
                raise ConfigError(f"unknown policy {pol!r}")
        if self.axis == "d" and any(not v > 0 for v in self.values):
            raise ConfigError("density values must be positive")
        if self.axis == "d" and any(v > self.market.lam for v in self.values):
            raise ConfigError("density values exceed lambda (p would exceed 1)")
        if self.axis == "tau" and any(not v >= 0 for v in self.values):
            raise ConfigError("tau values must be non-negative")
        if self.axis == "w" and any(not v > 0 for v in self.values):
            raise ConfigError("window sizes must be positive")
        if self.axis != "none" and not self.values:
            raise ConfigError(f"sweep.axis={self.axis} needs sweep.values")


def market_from(settings: dict) -> MarketConfig:
    lam = float(settings["market.lambda"])
    p = settings["market.p"]
    if p is None:
        p = float(settings["market.d"]) / lam if lam > 0 else 0.0
    try:
        return MarketConfig(
            lam=lam, p=float(p), T=float(settings["market.T"]), T0=float(settings["market.T0"]),
            seed=int(settings["experiment.seed"]),
            departure=LogNormalParams(float(settings["market.mu"]), float(settings["market.sigma"])),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def experiment_from(settings: dict) -> ExperimentConfig:
    axis = str(settings["sweep.axis"])
    if axis == "grid":
        values = tuple(GridSpec(**grid_kwargs(settings)).points())
    else:
        values = tuple(parse_list(settings["sweep.values"]))
    return ExperimentConfig(
        market=market_from(settings),
        policies=tuple(parse_list(settings["experiment.policy"], str)),
        k=int(settings["experiment.k"]),
        seed=int(settings["experiment.seed"]),
        axis=axis,
        values=values,
        output=str(settings["output.path"]),
        tau=float(settings["hybrid.tau"]),
        w=float(settings["hybrid.w"]),
        model_path=settings["hybrid.model"],
        min_samples=int(settings["hybrid.min_samples"]),
        sample_source=str(settings["hybrid.sample_source"]),
        initial_policy=str(settings["hybrid.initial_policy"]),
        workers=int(settings["experiment.workers"]),
        usage_start=settings["experiment.usage_start"],
    )


def grid_kwargs(settings: dict) -> dict:
    return {k.split(".", 1)[1]: float(settings[k]) for k in DEFAULTS if k.startswith("grid.")}


def train_params_from(settings: dict) -> TrainParams:
    hidden = tuple(int(h) for h in parse_list(settings["train.hidden"], int))
    return TrainParams(
        layer_sizes=(2, *hidden, 1),
        lr=float(settings["train.lr"]),
        epochs=int(settings["train.epochs"]),
        holdout=float(settings["train.holdout"]),
        mode=str(settings["train.mode"]),
        tau=float(settings["train.tau"]),
        seed=int(settings["train.seed"]),
    )


def with_market(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, market=replace(cfg.market, **changes))
