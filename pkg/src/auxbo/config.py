"""Declarative run configuration: one JSON document, strict keys, full defaults.

Every field has a default; unknown keys are rejected with their full path so
typos cannot silently change a run. The effective (default-filled) document
is echoed into each command's output directory.
"""

from __future__ import annotations

import copy
import json
import os


class ConfigError(ValueError):
    """Bad configuration document (unknown key, wrong type, bad value)."""


DEFAULTS: dict = {
    "seed": 0,
    "model": {
        "model_dim": 64,
        "predictor_layers": 4,
        "sequence_encoder_layers": 2,
        "heads": 4,
        "dropout_rate": 0.1,
        "sigma_floor": 1e-3,
        "variant": "aux",
    },
    "sampler": {
        "context_min": 5,
        "context_max": 30,
        "target_size": 100,
        "balanced": True,
        "high_quantile": 0.8,
    },
    "train": {
        "batch_tasks": 8,
        "learning_rate": 1e-4,
        "weight_decay": 0.01,
        "dropout": None,
        "max_epochs": 60,
        "patience": 8,
    },
    "dgp": {
        "epochs": 30,
        "sample_size": 50,
        "batch_tasks": 8,
        "learning_rate": 1e-4,
        "weight_decay": 0.01,
        "patience": 6,
        "families": ["rbf", "matern52"],
        "embedding_dims": [8, 16, 32],
        "hidden": 64,
    },
    "stgp": {
        "restarts": 4,
        "iters": 100,
    },
    "gen": {
        "train": 200,
        "val": 25,
        "test": 50,
        "pool": 256,
    },
    "protocol": {
        "init_size": 5,
        "trials": 30,
        "runs": 5,
        "acquisition": "pi",
        "sizes": [5, 10, 20, 30],
        "repeats": 10,
        "solved_threshold": 0.5,
    },
}


def _merge(defaults, override, path=""):
    if isinstance(defaults, dict):
        if not isinstance(override, dict):
            raise ConfigError(f"config key {path or '<root>'} must be an object")
        out = {}
        for key in override:
            if key not in defaults:
                raise ConfigError(f"unknown config key {path + key!r}")
        for key, dval in defaults.items():
            if key in override:
                out[key] = _merge(dval, override[key], f"{path}{key}.")
            else:
                out[key] = copy.deepcopy(dval)
        return out
    return copy.deepcopy(override)


def load_config(path: str | None) -> dict:
    """Default-filled effective config; unknown keys anywhere are an error."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top-level config must be a JSON object")
    return _merge(DEFAULTS, doc)


def resolve_seed(flag_seed: int | None, config: dict) -> int:
    """Precedence: command-line flag > AUXBO_SEED > config file > default."""
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get("AUXBO_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"AUXBO_SEED must be an integer, got {env!r}") from e
    return int(config["seed"])


def echo_config(config: dict, out_dir: str, command: str) -> str:
    """Write the effective config into the output directory; returns the path."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{command}_config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
