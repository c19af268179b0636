import copy
import json
import logging
import os
from typing import Any, Dict, Iterable, Optional

from utils.constants import DEFAULT_SETTINGS
from utils.errors import ConfigError

logger = logging.getLogger(__name__)


def load_settings(path: Optional[str] = None, overrides: Optional[Iterable[str]] = None) -> Dict[str, Any]:
    """Load settings from a JSON file layered over the defaults.

    Args:
        path: JSON file with one object per section, or None for defaults only
        overrides: dotted ``section.key=value`` strings applied last

    Returns:
        A fresh settings dict (defaults are never mutated)
    """
    settings = copy.deepcopy(DEFAULT_SETTINGS)

    if path:
        if not os.path.exists(path):
            raise ConfigError(f"settings file not found: {path}")
        try:
            with open(path, "r") as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"could not parse {path}: {e}") from e
        _merge(settings, loaded, path)
        logger.debug("Loaded settings from %s", path)

    for item in overrides or ():
        apply_override(settings, item)

    return settings


def save_settings(settings: Dict[str, Any], path: str) -> None:
    """Write the effective settings next to run outputs."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(settings, f, indent=4, sort_keys=True)


def apply_override(settings: Dict[str, Any], item: str) -> None:
    """Apply one ``section.key=value`` override in place.

    Values are parsed as JSON when possible so numbers, booleans and lists keep
    their types; anything else is taken as a plain string.
    """
    if "=" not in item:
        raise ConfigError(f"override must look like section.key=value: {item!r}")
    dotted, raw = item.split("=", 1)
    parts = dotted.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"override key must be section.key: {dotted!r}")
    section, key = parts
    _check_key(section, key)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    settings[section][key] = value


def _merge(settings: Dict[str, Any], loaded: Dict[str, Any], origin: str) -> None:
    if not isinstance(loaded, dict):
        raise ConfigError(f"{origin}: top level must be an object of sections")
    for section, values in loaded.items():
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: section {section!r} must be an object")
        for key, value in values.items():
            _check_key(section, key)
            settings[section][key] = value


def _check_key(section: str, key: str) -> None:
    if section not in DEFAULT_SETTINGS:
        raise ConfigError(f"unknown settings section: {section!r}")
    if key not in DEFAULT_SETTINGS[section]:
        raise ConfigError(f"unknown settings key: {section}.{key}")
