import copy
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

logger = logging.getLogger(__name__)

THREADS_ENV = "AIM_THREADS"
LOG_LEVEL_ENV = "AIM_LOG_LEVEL"
CONFIG_ENV = "AIM_CONFIG"

DEFAULT_CONFIG = {
    "merge": {
        "method": "task_arithmetic",
        "lambdas": None,
        "density": 0.5,
        "drop_rate": 0.5,
        "seed": 0,
    },

    "relax": {
        "omega": 0.4,
    },

    "profile": {
        "variant": "activation",
    },

    "evaluation": {
        "include_base": False,
        "base_name": "Base",
        "decimals": 6,
    },

    "ablate": {
        "omegas": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        "calib_sizes": [1, 2, 4, 8, 16, 32, 64, 128, 256],
    },

    "runtime": {
        "threads": None,  # None -> os.cpu_count()
        "log_level": "WARNING",
    },
}

_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def load_config(config_path: Optional[Path] = None) -> Dict[str, Any]:
    """
    Loads the configuration from a YAML file with deep merge support.

    Args:
        config_path: Path to custom configuration file

    Returns:
        Merged and validated configuration dictionary
    """
    if config_path is None and os.getenv(CONFIG_ENV):
        config_path = Path(os.environ[CONFIG_ENV])

    user_config: Dict[str, Any] = {}
    if config_path and Path(config_path).is_file():
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                user_config = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            logger.warning(f"Could not load config file '{config_path}': {e}; using defaults")
            user_config = {}
        if not isinstance(user_config, dict):
            logger.warning(f"Config file '{config_path}' is not a mapping; using defaults")
            user_config = {}
    elif config_path:
        logger.warning(f"Config file '{config_path}' not found; using defaults")

    config = deep_merge_dict(copy.deepcopy(DEFAULT_CONFIG), user_config)
    config = apply_env_overrides(config)
    return validate_config(config)


def deep_merge_dict(base_dict: Dict[str, Any], update_dict: Dict[str, Any]) -> Dict[str, Any]:
    """
    Deep merge two dictionaries.

    Args:
        base_dict: Base dictionary to merge into
        update_dict: Dictionary with updates

    Returns:
        Deep merged dictionary
    """
    result = base_dict.copy()

    for key, value in update_dict.items():
        if key in result and isinstance(value, dict) and isinstance(result[key], dict):
            result[key] = deep_merge_dict(result[key], value)
        else:
            result[key] = value

    return result


def apply_env_overrides(config: Dict[str, Any]) -> Dict[str, Any]:
    runtime = config.setdefault("runtime", {})

    raw_threads = os.getenv(THREADS_ENV)
    if raw_threads:
        try:
            threads = int(raw_threads)
            if threads < 1:
                raise ValueError(raw_threads)
            runtime["threads"] = threads
        except ValueError:
            logger.warning(f"Ignoring {THREADS_ENV}={raw_threads!r}: expected a positive integer")

    raw_level = os.getenv(LOG_LEVEL_ENV)
    if raw_level:
        runtime["log_level"] = raw_level.upper()

    return config


def validate_config(config: Dict[str, Any]) -> Dict[str, Any]:
    """
    Validate and fix critical configuration values.

    Out-of-range values are reset to their defaults with a warning.
    """
    for section, defaults in DEFAULT_CONFIG.items():
        if not isinstance(config.get(section), dict):
            config[section] = copy.deepcopy(defaults)

    merge = config["merge"]
    if not _in_range(merge.get("density"), 0.0, 1.0, low_open=True):
        _reset(merge, "merge", "density")
    if not _in_range(merge.get("drop_rate"), 0.0, 1.0, high_open=True):
        _reset(merge, "merge", "drop_rate")
    if not isinstance(merge.get("seed"), int) or merge["seed"] < 0:
        _reset(merge, "merge", "seed")

    relax = config["relax"]
    if not _in_range(relax.get("omega"), 0.0, 1.0):
        _reset(relax, "relax", "omega")

    if config["profile"].get("variant") not in ("activation", "sensitivity"):
        _reset(config["profile"], "profile", "variant")

    evaluation = config["evaluation"]
    if not isinstance(evaluation.get("include_base"), bool):
        _reset(evaluation, "evaluation", "include_base")
    if not isinstance(evaluation.get("base_name"), str) or not evaluation["base_name"]:
        _reset(evaluation, "evaluation", "base_name")
    decimals = evaluation.get("decimals")
    if isinstance(decimals, bool) or not isinstance(decimals, int) or not 6 <= decimals <= 17:
        _reset(evaluation, "evaluation", "decimals")

    ablate = config["ablate"]
    omegas = ablate.get("omegas")
    if not isinstance(omegas, list) or not omegas or not all(_in_range(w, 0.0, 1.0) for w in omegas):
        _reset(ablate, "ablate", "omegas")
    sizes = ablate.get("calib_sizes")
    if not isinstance(sizes, list) or not sizes or not all(isinstance(k, int) and k > 0 for k in sizes):
        _reset(ablate, "ablate", "calib_sizes")

    runtime = config["runtime"]
    threads = runtime.get("threads")
    if threads is not None and (not isinstance(threads, int) or threads < 1):
        _reset(runtime, "runtime", "threads")
    if str(runtime.get("log_level", "")).upper() not in _LOG_LEVELS:
        _reset(runtime, "runtime", "log_level")
    else:
        runtime["log_level"] = str(runtime["log_level"]).upper()

    return config


def resolve_threads(config: Dict[str, Any]) -> int:
    threads = config.get("runtime", {}).get("threads")
    return threads or os.cpu_count() or 1


def _in_range(value: Any, low: float, high: float, low_open: bool = False, high_open: bool = False) -> bool:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return False
    above = value > low if low_open else value >= low
    below = value < high if high_open else value <= high
    return above and below


def _reset(section: Dict[str, Any], section_name: str, key: str) -> None:
    default = copy.deepcopy(DEFAULT_CONFIG[section_name][key])
    logger.warning(f"Config value {section_name}.{key}={section.get(key)!r} is invalid; using {default!r}")
    section[key] = default


def save_sample_config(output_path: Path) -> None:
    """
    Save a sample configuration file holding every option at its default.

    Args:
        output_path: Path to save the sample configuration
    """
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w", encoding="utf-8") as f:
        f.write("# aim-merge configuration\n")
        yaml.safe_dump(DEFAULT_CONFIG, f, default_flow_style=False, indent=2, sort_keys=False)
    logger.info(f"Sample configuration saved to: {output_path}")
