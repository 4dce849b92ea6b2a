"""Run configuration: one YAML file shared by every CLI command.

Defaults describe the reference setup (58 silos, 1400 features,
1400-500-100-1 network, lambda 0.01, batch 100, 30 central epochs, 20x5
federated, 10x5 + 50 FADL). Keys absent from a file keep their defaults;
unknown keys are rejected.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

DEFAULTS = {
    "seed": 0,
    "data": {
        "seed": 0,
        "n_silos": 58,
        "feature_dim": 1400,
        "samples_per_silo": None,  # null = log-normal sizes
        "heterogeneity": 0.5,
        "target_prevalence": 0.055,
        "mean_active": 13.0,
        "rate_spread": 50.0,
        "signal_strength": 2.0,
        "private_rank": 4,
        "group_concentration": 0.5,
        "prevalence_spread": 1.0,
        "split": [0.7, 0.1, 0.2],
        "split_seed": 0,
    },
    "model": {
        "hidden": [500, 100],
        "init_seed": None,  # null = master seed
    },
    "train": {
        "learning_rate": 0.01,
        "batch_size": 100,
        "l2": 0.01,
    },
    "central": {"epochs": 30},
    "fedavg": {"global_cycles": 20, "local_epochs": 5, "seed": None},
    "fadl": {
        "stage1_cycles": 10,
        "stage1_local_epochs": 5,
        "stage2_epochs": 50,
        "seed": None,
        "fallback": False,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def validate(cfg: dict) -> dict:
    d, m, t = cfg["data"], cfg["model"], cfg["train"]
    _require(isinstance(cfg["seed"], int), "seed must be an integer")
    _require(isinstance(d["n_silos"], int) and d["n_silos"] >= 1, "data.n_silos must be >= 1")
    _require(isinstance(d["feature_dim"], int) and d["feature_dim"] >= 1,
             "data.feature_dim must be >= 1")
    _require(0.0 <= d["heterogeneity"] <= 1.0, "data.heterogeneity must lie in [0, 1]")
    _require(0.0 < d["target_prevalence"] < 1.0, "data.target_prevalence must lie in (0, 1)")
    _require(len(d["split"]) == 3 and abs(sum(d["split"]) - 1.0) < 1e-9
             and min(d["split"]) >= 0, "data.split must be three ratios summing to 1")
    _require(all(isinstance(h, int) and h >= 1 for h in m["hidden"]),
             "model.hidden must list positive layer sizes")
    _require(t["learning_rate"] > 0, "train.learning_rate must be > 0")
    _require(isinstance(t["batch_size"], int) and t["batch_size"] >= 1,
             "train.batch_size must be >= 1")
    _require(t["l2"] >= 0, "train.l2 must be >= 0")
    _require(cfg["central"]["epochs"] >= 0, "central.epochs must be >= 0")
    _require(cfg["fedavg"]["global_cycles"] >= 1 and cfg["fedavg"]["local_epochs"] >= 1,
             "fedavg cycles and local epochs must be >= 1")
    f = cfg["fadl"]
    _require(f["stage1_cycles"] >= 1 and f["stage1_local_epochs"] >= 1,
             "fadl stage-1 cycles and local epochs must be >= 1")
    _require(f["stage2_epochs"] >= 0, "fadl.stage2_epochs must be >= 0")
    _require(len(m["hidden"]) >= 1, "FADL needs at least one hidden layer")
    return cfg


def load_config(path=None, seed: int | None = None) -> dict:
    """Defaults, overlaid with ``path`` (if given) and a ``seed`` override."""
    override = {}
    if path is not None:
        try:
            override = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(override, dict):
            raise ConfigError("config file must hold a mapping at top level")
    cfg = _merge(DEFAULTS, override)
    if seed is not None:
        cfg["seed"] = int(seed)
    try:
        return validate(cfg)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)
