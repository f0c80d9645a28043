"""Experiment configuration: schema, defaults and validation.

Validation errors name the offending key with a dotted path
(``counters.n_pol``), which the CLI reports verbatim.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .dyn_model import TrainConfig
from .envs import Env, make_env
from .infogain import UtilitySpec
from .planner import CemConfig
from .posterior import BackendConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class Counters:
    n_ex_steps: int = 2000
    n_ex_warm: int = 64
    n_pol: int = 25
    n_eval: int = 500
    n_k: int = 2
    n_ev_steps: int = 50


@dataclass
class ExperimentConfig:
    env: str = "pointmass2d"
    env_params: dict = field(default_factory=dict)
    tasks: list[str] = field(default_factory=list)
    backend: BackendConfig = field(default_factory=BackendConfig)
    utility: UtilitySpec = field(default_factory=UtilitySpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    planner: CemConfig = field(default_factory=CemConfig)
    eval_train: TrainConfig = field(default_factory=TrainConfig)
    eval_planner: CemConfig = field(default_factory=lambda: CemConfig(mode="mean"))
    counters: Counters = field(default_factory=Counters)
    seed: int = 0

    def make_env(self) -> Env:
        return make_env(self.env, **self.env_params)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backend"]["N"] = d["backend"].pop("n_samples")
        d["utility"] = {"kind": self.utility.kind, "epsilon": self.utility.epsilon,
                        "homoscedastic": self.utility.homoscedastic}
        for k in ("train", "eval_train"):
            d[k]["hidden"] = list(d[k]["hidden"])
        return d

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


REQUIRED = ("env", "backend", "utility", "counters", "seed")


def _build(cls, data: Any, key: str, defaults=None):
    if not isinstance(data, dict):
        raise ConfigError(key, f"expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    for k in data:
        if k not in known:
            raise ConfigError(f"{key}.{k}", "unknown key")
    kwargs = dict(defaults or {})
    kwargs.update(data)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def _int_fields(obj, key):
    for f in fields(obj):
        v = getattr(obj, f.name)
        if f.type in ("int", int) and not (isinstance(v, int) and not isinstance(v, bool)):
            raise ConfigError(f"{key}.{f.name}", f"expected an integer, got {v!r}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    c = cfg.counters
    _int_fields(c, "counters")
    for name in ("n_ex_steps", "n_ex_warm", "n_k", "n_ev_steps"):
        if getattr(c, name) < 0:
            raise ConfigError(f"counters.{name}", "must be >= 0")
    if c.n_ex_warm > c.n_ex_steps:
        raise ConfigError("counters.n_ex_warm", "must not exceed n_ex_steps")
    if c.n_pol < 1:
        raise ConfigError("counters.n_pol", "must be >= 1")
    if c.n_eval < 1 or c.n_eval % c.n_pol:
        raise ConfigError("counters.n_eval", "must be a positive multiple of n_pol")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or cfg.seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    try:
        env = cfg.make_env()
    except (TypeError, ValueError) as exc:
        raise ConfigError("env", str(exc)) from None
    for t in cfg.tasks:
        if t not in env.tasks:
            raise ConfigError("tasks", f"unknown task {t!r} for {cfg.env}; "
                                       f"available: {sorted(env.tasks)}")
    if cfg.utility.kind == "entropy_laplace" and cfg.backend.kind != "laplace":
        raise ConfigError("utility.kind", "entropy_laplace requires backend.kind = laplace")
    if cfg.utility.kind == "entropy_samples" and cfg.backend.n_samples < 2:
        raise ConfigError("backend.N", "entropy_samples needs N >= 2")
    return cfg


def from_dict(data: dict, overrides: dict | None = None) -> ExperimentConfig:
    """Build and validate a config; ``overrides`` (dotted keys) take precedence."""
    data = copy.deepcopy(data)
    for dotted, v in (overrides or {}).items():
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    for k in REQUIRED:
        if k not in data:
            raise ConfigError(k, "missing required key")
    known = {f.name for f in fields(ExperimentConfig)}
    for k in data:
        if k not in known:
            raise ConfigError(k, "unknown key")
    env = data["env"]
    env_params = dict(data.get("env_params", {}))
    if isinstance(env, dict):
        env_params.update({k: v for k, v in env.items() if k != "name"})
        if "name" not in env:
            raise ConfigError("env.name", "missing required key")
        env = env["name"]
    backend = dict(data["backend"]) if isinstance(data["backend"], dict) else data["backend"]
    if isinstance(backend, dict) and "N" in backend:
        backend["n_samples"] = backend.pop("N")
    train = _build(TrainConfig, data.get("train", {}), "train")
    eval_train = _build(TrainConfig, data.get("eval_train", data.get("train", {})), "eval_train")
    cfg = ExperimentConfig(
        env=env,
        env_params=env_params,
        tasks=list(data.get("tasks", [])),
        backend=_build(BackendConfig, backend, "backend"),
        utility=_build(UtilitySpec, data["utility"], "utility"),
        train=train,
        planner=_build(CemConfig, data.get("planner", {}), "planner"),
        eval_train=eval_train,
        eval_planner=_build(CemConfig, data.get("eval_planner", {}), "eval_planner",
                            defaults={"mode": "mean"}),
        counters=_build(Counters, data["counters"], "counters"),
        seed=data["seed"],
    )
    return validate(cfg)


def load(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return from_dict(data, overrides)
