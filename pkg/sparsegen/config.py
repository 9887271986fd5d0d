# sparsegen/config.py
"""
Run configuration: built-in defaults, then a flat YAML/JSON file, then CLI flags.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import yaml
from pydantic import ValidationError

from .errors import ConfigurationError
from .models import RunConfig
from .tensor_ops import set_precision

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_NAME = "sparsegen.yml"


def get_env_settings() -> Dict[str, str]:
    """Process-level settings from the environment."""
    return {
        "log_level": os.environ.get("SPARSEGEN_LOG", "INFO").upper(),
        "precision": os.environ.get("SPARSEGEN_PRECISION", "float64"),
    }


def apply_env_settings() -> Dict[str, str]:
    settings = get_env_settings()
    set_precision(settings["precision"])
    return settings


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Read a flat config mapping. JSON files load too, since JSON is YAML.

    Raises:
        OSError: the file cannot be read
        ConfigurationError: the document is not a mapping
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Cannot parse config file {path}: {e}") from e
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigurationError(
            f"Config file {path} must hold a mapping, got {type(doc).__name__}"
        )
    logger.info(f"Loaded configuration from {path}")
    return doc


def build_run_config(
    file_values: Optional[Mapping[str, Any]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Merge file values and overrides (None-valued overrides are ignored)."""
    merged: Dict[str, Any] = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid run configuration: {e}") from e


def load_run_config(
    path: Union[str, Path, None] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    file_values = read_config_file(path) if path is not None else {}
    return build_run_config(file_values, overrides)
