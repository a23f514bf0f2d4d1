# app/config/loader.py

import os
import copy
import json
import shutil
import logging
from typing import Any, Dict, List, Optional

from app.core.settings import (
    DEFAULT_MAX_INDEPENDENT_SETS,
    DEFAULT_MEASURED_SLOTS,
    DEFAULT_OUTPUT_DIR,
    DEFAULT_REPLICATIONS,
    DEFAULT_SEED,
    DEFAULT_WARMUP_SLOTS,
    ENV_PREFIX,
    NEAR_INSTABILITY_THRESHOLD,
    SIGNIFICANT_DIGITS,
)

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = os.path.join("configs", "config.json")
TEMPLATE_CONFIG_PATH = os.path.join("configs", "config.template.json")

DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    "solver": {
        "max_independent_sets": DEFAULT_MAX_INDEPENDENT_SETS,
        "near_instability_threshold": NEAR_INSTABILITY_THRESHOLD,
    },
    "simulation": {
        "seed": DEFAULT_SEED,
        "warmup_slots": DEFAULT_WARMUP_SLOTS,
        "measured_slots": DEFAULT_MEASURED_SLOTS,
        "replications": DEFAULT_REPLICATIONS,
        "workers": 1,
        "checked": False,
    },
    "output": {
        "dir": DEFAULT_OUTPUT_DIR,
        "significant_digits": SIGNIFICANT_DIGITS,
    },
    "sweep": {
        "workers": 1,
        "with_sim": False,
    },
    "database": {
        "url": None,
    },
}

_TRUE_STRINGS = {"1", "true", "yes", "on"}
_FALSE_STRINGS = {"0", "false", "no", "off"}


class ConfigError(Exception):
    """Custom exception for configuration-related errors."""
    pass


def create_default_config(config_path: str, template_path: str = TEMPLATE_CONFIG_PATH) -> None:
    """
    Create a configuration file by copying the template.

    :param config_path: Path where the config file should be created
    :param template_path: Template to copy
    :raises ConfigError: If the template doesn't exist or can't be copied
    """
    if not os.path.exists(template_path):
        raise ConfigError(
            f"Neither config file '{config_path}' nor template '{template_path}' found. "
            "Please ensure you have a valid configuration file."
        )

    try:
        directory = os.path.dirname(config_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        shutil.copy2(template_path, config_path)
        logger.info(f"Created new config file at {config_path} from template")
    except IOError as e:
        raise ConfigError(f"Failed to create config file from template: {e}")


def load_config(
    config_path: Optional[str] = None,
    env_prefix: str = ENV_PREFIX,
    auto_create: bool = False
) -> Dict[str, Any]:
    """
    Load configuration from a JSON file merged over the built-in defaults,
    then apply environment variable overrides.

    :param config_path: Path to the JSON configuration file. If not provided,
                       'configs/config.json' is used when present and the
                       defaults otherwise.
    :param env_prefix: Prefix of environment variables overriding config values,
                      e.g. MATCH_SIMULATION_SEED for simulation.seed.
    :param auto_create: If True, copies the template when the file is missing.
    :return: Dictionary representing the complete, validated configuration.
    :raises ConfigError: If configuration loading or validation fails
    """
    config_data = copy.deepcopy(DEFAULT_CONFIG)
    explicit = config_path is not None
    config_path = config_path or DEFAULT_CONFIG_PATH

    if not os.path.exists(config_path):
        if auto_create:
            create_default_config(config_path)
        elif explicit:
            raise ConfigError(
                f"Configuration file not found: {config_path}\n"
                f"Please copy {TEMPLATE_CONFIG_PATH} to {config_path} and update with your settings."
            )

    if os.path.exists(config_path):
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                file_data = json.load(f)
            logger.info(f"Loaded configuration from {config_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(
                f"Invalid JSON in config file: {config_path}\n"
                f"Error: {str(e)}\n"
                "Please verify your configuration file format."
            )
        except Exception as e:
            raise ConfigError(f"Failed to read config file: {str(e)}")
        _merge(config_data, file_data)
    else:
        logger.debug("No configuration file found, using defaults")

    # Process environment variable overrides
    _process_env_overrides(config_data, env_prefix)

    # Validate the configuration
    _validate_config(config_data)

    return config_data


def _merge(config_data: Dict[str, Any], file_data: Any) -> None:
    """Merge a loaded file section by section, rejecting unknown sections and keys."""
    if not isinstance(file_data, dict):
        raise ConfigError("Configuration root must be a JSON object")

    for section, values in file_data.items():
        if section not in DEFAULT_CONFIG:
            raise ConfigError(f"Unknown config section: '{section}'")
        if not isinstance(values, dict):
            raise ConfigError(f"Config section '{section}' must be an object")
        for key, value in values.items():
            if key not in DEFAULT_CONFIG[section]:
                raise ConfigError(f"Unknown config key: '{section}.{key}'")
            config_data[section][key] = value


def _process_env_overrides(config_data: Dict[str, Any], env_prefix: str) -> None:
    """Process all environment variable overrides for the configuration."""
    for section, values in DEFAULT_CONFIG.items():
        for key in values:
            _env_override(config_data, [section, key], env_prefix, f"{section}_{key}".upper())


def _env_override(
    config_data: Dict[str, Any],
    nested_keys: List[str],
    env_prefix: str,
    env_suffix: str
) -> None:
    """
    If an environment variable with prefix+suffix exists, override the
    nested config_data value, coerced to the type of the default.

    :param config_data: Loaded configuration dictionary.
    :param nested_keys: Nested path of keys in config_data,
                        e.g. ["simulation", "seed"] -> config_data["simulation"]["seed"].
    :param env_prefix:  The prefix used for environment variables, e.g. 'MATCH_'.
    :param env_suffix:  The suffix for a specific key, e.g. 'SIMULATION_SEED'.
    :return: None (modifies config_data in-place).
    """
    env_var = env_prefix + env_suffix
    env_value = os.getenv(env_var)
    if env_value:
        default = DEFAULT_CONFIG[nested_keys[0]][nested_keys[1]]
        _set_nested_value(config_data, nested_keys, _coerce(env_value, default, env_var))
        logger.info(f"Overrode config[{'.'.join(nested_keys)}] from environment variable '{env_var}'")


def _coerce(raw: str, default: Any, env_var: str) -> Any:
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered in _TRUE_STRINGS:
                return True
            if lowered in _FALSE_STRINGS:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"Environment variable '{env_var}' has invalid value '{raw}'")
    return raw


def _set_nested_value(
    data: Dict[str, Any],
    nested_keys: List[str],
    value: Any
) -> None:
    """
    Traverse nested dictionaries by a list of keys and set the final key to 'value'.
    E.g. nested_keys = ["foo", "bar"] => data["foo"]["bar"] = value.

    :param data: Dictionary to modify.
    :param nested_keys: Keys in nested path.
    :param value: Value to set.
    """
    d = data
    for key in nested_keys[:-1]:
        d = d.setdefault(key, {})
    d[nested_keys[-1]] = value


def _require_int(config_data: Dict[str, Any], section: str, key: str, minimum: int) -> None:
    value = config_data[section][key]
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"'{section}.{key}' must be an integer >= {minimum}, got {value!r}")


def _validate_config(config_data: Dict[str, Any]) -> None:
    """
    Validate types and ranges of the merged configuration.
    Raise ConfigError if a value is missing or invalid.

    :param config_data: The final merged config dictionary.
    """
    _require_int(config_data, "solver", "max_independent_sets", 1)
    threshold = config_data["solver"]["near_instability_threshold"]
    if isinstance(threshold, bool) or not isinstance(threshold, (int, float)) or threshold < 0:
        raise ConfigError(f"'solver.near_instability_threshold' must be a nonnegative number, got {threshold!r}")

    _require_int(config_data, "simulation", "seed", 0)
    _require_int(config_data, "simulation", "warmup_slots", 0)
    _require_int(config_data, "simulation", "measured_slots", 1)
    _require_int(config_data, "simulation", "replications", 1)
    _require_int(config_data, "simulation", "workers", 1)
    _require_int(config_data, "sweep", "workers", 1)
    _require_int(config_data, "output", "significant_digits", 1)

    for section, key in (("simulation", "checked"), ("sweep", "with_sim")):
        if not isinstance(config_data[section][key], bool):
            raise ConfigError(f"'{section}.{key}' must be true or false")

    if not isinstance(config_data["output"]["dir"], str) or not config_data["output"]["dir"]:
        raise ConfigError("Missing 'output.dir' in configuration.")
    url = config_data["database"]["url"]
    if url is not None and not isinstance(url, str):
        raise ConfigError("'database.url' must be a string or null")

    logger.debug("Configuration validation passed successfully.")
