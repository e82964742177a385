"""
Run configuration loading.

Resolution order: TrainConfig defaults, then the config file (JSON or YAML,
both read with PyYAML), then --set overrides, then the environment
(SSL_RUN_DIR overrides run_dir).
"""

import json
import logging
import os
from pathlib import Path
from typing import Optional, Sequence, Union

import yaml

from src.errors import ConfigurationError
from src.models.train_config import TrainConfig

logger = logging.getLogger(__name__)

RUN_DIR_ENV = "SSL_RUN_DIR"
RESOLVED_NAME = "config.json"


def _get_config_file(explicit: Optional[Union[str, Path]] = None) -> Optional[Path]:
    """
    Determine which config file to use.

    Priority:
    1. The file named on the command line
    2. config/desk.yaml shipped with the repository

    Returns:
        Path to the config file, or None when neither exists

    Raises:
        ConfigurationError: if an explicitly named file does not exist
    """
    if explicit is not None:
        path = Path(explicit)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        return path

    desk = Path(__file__).parent / "desk.yaml"
    if desk.exists():
        return desk

    logger.warning("No config file found, using built-in defaults")
    return None


def load_config_file(path: Union[str, Path]) -> dict:
    """
    Read a flat JSON or YAML mapping.

    Raises:
        ConfigurationError: if the file is malformed or not a flat mapping
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: malformed config: {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a mapping, got {type(data).__name__}")
    nested = sorted(k for k, v in data.items() if isinstance(v, dict))
    if nested:
        raise ConfigurationError(f"{path}: config must be flat, nested keys: {', '.join(nested)}")
    logger.info(f"Loaded {len(data)} settings from {path.name}")
    return data


def parse_overrides(pairs: Sequence[str]) -> dict:
    """
    Parse --set key=value pairs; values are YAML scalars.

    Raises:
        ConfigurationError: for entries without '='
    """
    overrides = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"override '{pair}' is not key=value")
        try:
            overrides[key.strip()] = yaml.safe_load(raw) if raw.strip() else ""
        except yaml.YAMLError as e:
            raise ConfigurationError(f"override '{pair}': {e}")
    return overrides


def resolve_config(
    config_path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    environ: Optional[dict] = None,
) -> TrainConfig:
    """Build the effective TrainConfig."""
    environ = os.environ if environ is None else environ
    merged: dict = {}

    path = _get_config_file(config_path)
    if path is not None:
        merged.update(load_config_file(path))
    merged.update(parse_overrides(overrides))
    if environ.get(RUN_DIR_ENV):
        merged["run_dir"] = environ[RUN_DIR_ENV]

    return TrainConfig.from_mapping(merged)


def write_resolved(config: TrainConfig, run_dir: Union[str, Path]) -> Path:
    """Echo the resolved configuration into the run directory."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / RESOLVED_NAME
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return path
