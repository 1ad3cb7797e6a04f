import copy
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import jsonschema

from .errors import ConfigError

logger = logging.getLogger(__name__)

repo_root_path = Path(__file__).resolve().parent.parent

CONFIG_PATH = repo_root_path / 'config.json'
CONFIG_EXAMPLE_PATH = repo_root_path / 'config.json.example'

_CONFIG_CACHE: Optional[Dict[str, Any]] = None

DEFAULT_CONFIG: Dict[str, Any] = {
    "experiment": {
        "name": "markov_put",
        "model": "bm_sde",
        "phi": "pow2",
        "eps_list": [],
        "k_list": [1, 2, 3],
        "horizon": 1.0,
        "x0": 36.0,
        "train_paths": 20000,
        "fresh_paths": 20000,
        "seed": 20240607,
    },
    "skeleton": {"dim": 1},
    "model": {
        "drift": "linear_drift",
        "drift_params": [0.06],
        "vol": "linear",
        "vol_params": [0.2],
    },
    "payoff": {"name": "put", "params": [40.0, 0.06]},
    "basis": {
        "family": "polynomial",
        "degree": 2,
        "window": 1,
        "clip_bound": None,
        "itm_only": False,
    },
    "fbm": {"hurst": 0.6, "quad_order": 32},
    "reference": {
        "kind": "crr",
        "payoff": "put",
        "strike": 40.0,
        "rate": 0.06,
        "sigma": 0.2,
        "steps": 2000,
    },
    "report": {"lambda": 0.15, "beta": 0.5, "zeta": 1.0, "delta": 0.1},
    "runtime": {"threads": 1, "output_dir": "reports", "log_level": "INFO"},
}

_NUM_LIST = {"type": "array", "items": {"type": "number"}}

CONFIG_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["experiment", "model", "payoff", "basis", "reference", "runtime"],
    "properties": {
        "experiment": {
            "type": "object",
            "required": ["model", "k_list", "horizon", "train_paths", "fresh_paths", "seed"],
            "properties": {
                "name": {"type": "string"},
                "model": {"enum": ["bm_sde", "fbm_drift"]},
                "phi": {"enum": ["pow2", "custom"]},
                "eps_list": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "k_list": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "x0": {"type": "number"},
                "train_paths": {"type": "integer", "minimum": 2},
                "fresh_paths": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "skeleton": {
            "type": "object",
            "properties": {"dim": {"type": "integer", "minimum": 1}},
        },
        "model": {
            "type": "object",
            "required": ["drift"],
            "properties": {
                "drift": {"type": "string"},
                "drift_params": _NUM_LIST,
                "vol": {"type": "string"},
                "vol_params": _NUM_LIST,
            },
        },
        "payoff": {
            "type": "object",
            "required": ["name"],
            "properties": {"name": {"type": "string"}, "params": _NUM_LIST},
        },
        "basis": {
            "type": "object",
            "properties": {
                "family": {"enum": ["polynomial", "piecewise_linear", "constant", "lookup"]},
                "degree": {"type": "integer", "minimum": 0},
                "window": {"type": "integer", "minimum": 0},
                "clip_bound": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "itm_only": {"type": "boolean"},
            },
        },
        "fbm": {
            "type": "object",
            "properties": {
                "hurst": {"type": "number", "minimum": 0.5, "exclusiveMaximum": 1},
                "quad_order": {"type": "integer", "minimum": 4},
            },
        },
        "reference": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["crr", "self", "none"]},
                "payoff": {"enum": ["put", "call"]},
                "strike": {"type": "number"},
                "rate": {"type": "number"},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "steps": {"type": "integer", "minimum": 1},
            },
        },
        "report": {
            "type": "object",
            "properties": {
                "lambda": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5},
                "beta": {"type": "number", "exclusiveMinimum": 0},
                "zeta": {"type": "number", "exclusiveMinimum": 0},
                "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "runtime": {
            "type": "object",
            "properties": {
                "threads": {"type": "integer", "minimum": 1},
                "output_dir": {"type": "string"},
                "log_level": {"enum": ["DEBUG", "INFO", "WARNING", "ERROR"]},
            },
        },
    },
}


def default_config() -> Dict[str, Any]:
    """Copy of the built-in defaults."""
    return copy.deepcopy(DEFAULT_CONFIG)


def _deep_merge_dicts(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge override into base (override wins)."""
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge_dicts(base[key], value)
        else:
            base[key] = value
    return base


def _read_json(path: Path) -> Dict[str, Any]:
    with open(path, "r") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def _apply_env_overrides(config: Dict[str, Any]) -> None:
    env = {
        "SNELL_SEED": ("experiment", "seed", int),
        "SNELL_THREADS": ("runtime", "threads", int),
        "SNELL_OUTPUT_DIR": ("runtime", "output_dir", str),
    }
    for var, (section, key, cast) in env.items():
        raw = os.environ.get(var)
        if raw is None:
            continue
        try:
            config.setdefault(section, {})[key] = cast(raw)
        except ValueError as e:
            raise ConfigError(f"environment variable {var}={raw!r} is not a valid {cast.__name__}") from e


def validate_config(config: Dict[str, Any]) -> None:
    """Schema check plus the cross-field rules the schema cannot express."""
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"invalid configuration at {where}: {e.message}") from e

    experiment = config["experiment"]
    if experiment.get("phi") == "custom":
        eps_list = experiment.get("eps_list", [])
        if not eps_list:
            raise ConfigError("phi 'custom' needs a non-empty experiment.eps_list")
        bad = [k for k in experiment["k_list"] if not 1 <= k <= len(eps_list)]
        if bad:
            raise ConfigError(f"k_list entries {bad} have no eps in experiment.eps_list")
    if experiment["model"] == "fbm_drift" and config.get("skeleton", {}).get("dim", 1) != 1:
        raise ConfigError("fbm_drift runs on one-dimensional skeletons only")


def load_config(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """Load configuration with error handling and validation"""
    global _CONFIG_CACHE

    if path is None and _CONFIG_CACHE is not None:
        return copy.deepcopy(_CONFIG_CACHE)

    config = default_config()
    try:
        if CONFIG_EXAMPLE_PATH.exists():
            _deep_merge_dicts(config, _read_json(CONFIG_EXAMPLE_PATH))

        target = Path(path) if path is not None else CONFIG_PATH
        if target.exists():
            _deep_merge_dicts(config, _read_json(target))
            logger.info(f"Configuration loaded from: {target}")
        elif path is not None:
            raise FileNotFoundError(f"configuration file not found: {target}")
        else:
            logger.warning(
                "config.json not found. Using built-in defaults and config.json.example. "
                "Create config.json for custom settings."
            )
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in configuration file: {e}") from e
    except OSError as e:
        raise ConfigError(f"Error loading configuration: {e}") from e

    _apply_env_overrides(config)
    validate_config(config)

    if path is None:
        _CONFIG_CACHE = copy.deepcopy(config)
    return config


def apply_cli_overrides(config: Dict[str, Any], seed: Optional[int] = None, threads: Optional[int] = None,
                        output_dir: Optional[str] = None) -> Dict[str, Any]:
    """Command-line flags win over files and environment."""
    config = copy.deepcopy(config)
    if seed is not None:
        config["experiment"]["seed"] = int(seed)
    if threads is not None:
        config["runtime"]["threads"] = int(threads)
    if output_dir is not None:
        config["runtime"]["output_dir"] = str(output_dir)
    validate_config(config)
    return config
