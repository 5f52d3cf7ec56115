"""Experiment configuration: a JSON document with fixed sections.

Unknown keys are rejected with their dotted path. Missing keys take the
defaults below (hyperparameter defaults follow the reference CIFAR setup:
eta_g = 10, lambda = 1e-4, mu = 1e-3, lr 0.1 decayed by 0.998 per round,
10% participation, weight decay 1e-3).
"""

import copy
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

from .core import HyperParams

METHODS = ("fedslr", "fedavg", "lpgd", "gpgd")

DATA_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "synthetic": {"classes": 10, "dim": 20, "per_class": 200, "separation": 3.0,
                  "test_per_class": 100},
    "idx": {"train_images": None, "train_labels": None, "test_images": None, "test_labels": None},
    "csv": {"train": None, "test": None},
    "quadratic": {"layers": [[6, 4], [5, 6]], "biases": True, "eig_min": 0.5, "eig_max": 2.0,
                  "spread": 1.0},
}

HYPER_KEYS = {"eta_g": "eta_g", "eta_l": "eta_l", "lambda": "lam", "mu": "mu",
              "K_local": "K_local", "K_fusion": "K_fusion", "T": "T", "batch_size": "batch_size",
              "lr_decay": "lr_decay", "participation": "participation",
              "weight_decay": "weight_decay"}


class ConfigError(ValueError):
    def __init__(self, path, field_name, message):
        super().__init__(f"{path}: {field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    method: str = "fedslr"
    seed: int = 0
    output_dir: str = "runs/default"
    eval_every: int = 1
    checkpoint_every: int = 0
    memory_efficient: bool = False
    local_solver: str = "sgd"
    model: Dict[str, Any] = field(default_factory=lambda: {"hidden": [], "activation": "relu"})
    data: Dict[str, Any] = field(default_factory=lambda: {"source": "synthetic",
                                                          **DATA_DEFAULTS["synthetic"]})
    split: Dict[str, Any] = field(default_factory=lambda: {"clients": 20, "alpha": 0.1,
                                                           "test_per_client": 100, "iid": False})
    hyper: HyperParams = field(default_factory=HyperParams)

    def to_dict(self) -> dict:
        return {
            "method": self.method, "seed": self.seed, "output_dir": self.output_dir,
            "eval_every": self.eval_every, "checkpoint_every": self.checkpoint_every,
            "memory_efficient": self.memory_efficient, "local_solver": self.local_solver,
            "model": copy.deepcopy(self.model), "data": copy.deepcopy(self.data),
            "split": copy.deepcopy(self.split),
            "hyper": {k: getattr(self.hyper, attr) for k, attr in HYPER_KEYS.items()},
        }


def _section(raw, name, defaults, path):
    given = raw.get(name, {})
    if not isinstance(given, dict):
        raise ConfigError(path, name, "must be an object")
    for key in given:
        if key not in defaults:
            raise ConfigError(path, f"{name}.{key}", "unknown key")
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given))
    return out


def _number(path, name, value, integer=False):
    ok = isinstance(value, int) if integer else isinstance(value, (int, float))
    if isinstance(value, bool) or not ok:
        raise ConfigError(path, name, f"expected {'an integer' if integer else 'a number'}, got {value!r}")
    return value


def config_from_dict(raw: dict, path="<config>") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(path, "<root>", "top level must be an object")
    top = {"method", "seed", "output_dir", "eval_every", "checkpoint_every", "memory_efficient",
           "local_solver", "model", "data", "split", "hyper"}
    for key in raw:
        if key not in top:
            raise ConfigError(path, key, "unknown key")
    cfg = ExperimentConfig()
    cfg.method = raw.get("method", cfg.method)
    if cfg.method not in METHODS:
        raise ConfigError(path, "method", f"must be one of {', '.join(METHODS)}")
    cfg.seed = _number(path, "seed", raw.get("seed", cfg.seed), integer=True)
    cfg.output_dir = str(raw.get("output_dir", cfg.output_dir))
    cfg.eval_every = _number(path, "eval_every", raw.get("eval_every", cfg.eval_every), integer=True)
    cfg.checkpoint_every = _number(path, "checkpoint_every",
                                   raw.get("checkpoint_every", cfg.checkpoint_every), integer=True)
    if cfg.eval_every < 1:
        raise ConfigError(path, "eval_every", "must be >= 1")
    if cfg.checkpoint_every < 0:
        raise ConfigError(path, "checkpoint_every", "must be >= 0")
    cfg.memory_efficient = bool(raw.get("memory_efficient", cfg.memory_efficient))
    cfg.local_solver = raw.get("local_solver", cfg.local_solver)
    if cfg.local_solver not in ("sgd", "exact"):
        raise ConfigError(path, "local_solver", "must be 'sgd' or 'exact'")

    cfg.model = _section(raw, "model", {"hidden": [], "activation": "relu"}, path)
    if cfg.model["activation"] not in ("relu", "tanh"):
        raise ConfigError(path, "model.activation", "must be 'relu' or 'tanh'")
    if not isinstance(cfg.model["hidden"], list) or any(
            isinstance(h, bool) or not isinstance(h, int) or h < 1 for h in cfg.model["hidden"]):
        raise ConfigError(path, "model.hidden", "must be a list of positive integers")

    data_raw = raw.get("data", {})
    source = data_raw.get("source", "synthetic") if isinstance(data_raw, dict) else None
    if source not in DATA_DEFAULTS:
        raise ConfigError(path, "data.source", f"must be one of {', '.join(DATA_DEFAULTS)}")
    cfg.data = _section(raw, "data", {"source": source, **DATA_DEFAULTS[source]}, path)
    for key, value in cfg.data.items():
        if value is None:
            raise ConfigError(path, f"data.{key}", "required for this source")
    if source == "quadratic":
        for layer in cfg.data["layers"]:
            if not (isinstance(layer, list) and len(layer) in (2, 3)
                    and all(isinstance(x, int) and x >= 1 for x in layer)):
                raise ConfigError(path, "data.layers",
                                  "each layer is [out, in] (dense) or [out, in, kernel] (square conv)")

    cfg.split = _section(raw, "split", {"clients": 20, "alpha": 0.1, "test_per_client": 100,
                                        "iid": False}, path)
    _number(path, "split.clients", cfg.split["clients"], integer=True)
    _number(path, "split.alpha", cfg.split["alpha"])
    if cfg.split["clients"] < 1:
        raise ConfigError(path, "split.clients", "must be >= 1")
    if not cfg.split["alpha"] > 0:
        raise ConfigError(path, "split.alpha", "must be > 0")

    hyper_raw = raw.get("hyper", {})
    if not isinstance(hyper_raw, dict):
        raise ConfigError(path, "hyper", "must be an object")
    kwargs = {}
    for key, value in hyper_raw.items():
        if key not in HYPER_KEYS:
            raise ConfigError(path, f"hyper.{key}", "unknown key")
        integer = key in ("K_local", "K_fusion", "T", "batch_size")
        kwargs[HYPER_KEYS[key]] = _number(path, f"hyper.{key}", value, integer=integer)
    try:
        cfg.hyper = HyperParams(**kwargs)
    except ValueError as exc:
        name = str(exc).split("invalid hyperparameter ")[-1].split("=")[0]
        raise ConfigError(path, name, str(exc)) from None

    if cfg.method != "fedslr":
        if "mu" in hyper_raw and hyper_raw["mu"] != HyperParams().mu:
            warnings.warn(f"{path}: mu is ignored for method {cfg.method!r}")
        if cfg.memory_efficient:
            raise ConfigError(path, "memory_efficient", "only applies to method 'fedslr'")
    if cfg.memory_efficient and cfg.hyper.participation < 1:
        raise ConfigError(path, "memory_efficient", "requires participation = 1")
    if cfg.local_solver == "exact" and source != "quadratic":
        raise ConfigError(path, "local_solver", "exact solves need data.source = 'quadratic'")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(path, "<file>", "not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(path, "<json>", f"line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return config_from_dict(raw, path)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
