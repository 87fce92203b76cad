"""Flat key=value run configuration files.

Keys are dotted (``data.channels``, ``h2d.nu``, ``train.seeds``) plus the
top-level ``out_dir`` and ``seed``. List values are comma-separated. Files are
parsed with python-dotenv, so ``#`` comments and blank lines are allowed.
"""

import logging
from collections.abc import Iterable, Mapping
from enum import Enum
from pathlib import Path
from typing import Any

from dotenv import dotenv_values

from h2dilr.core.errors import ConfigError
from h2dilr.models.config import RunConfig

logger = logging.getLogger(__name__)

SECTIONS = ("data", "model", "h2d", "train")
TOP_LEVEL = ("out_dir", "seed")
ECHO_FILE = "config.echo"


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    return str(value)


def key_spellings() -> dict[str, str]:
    """Every accepted key mapped to its canonical (alias) spelling."""
    spellings = {key: key for key in TOP_LEVEL}
    for section in SECTIONS:
        for name, info in RunConfig.model_fields[section].annotation.model_fields.items():
            alias = f"{section}.{info.alias or name}"
            spellings[f"{section}.{name}"] = alias
            spellings[alias] = alias
    return spellings


def known_keys() -> set[str]:
    """Every accepted dotted key, aliases included."""
    return set(key_spellings())


def canonical(flat: Mapping[str, Any]) -> dict[str, Any]:
    """Rewrite field-name keys (``h2d.k_private``) to their alias; unknown keys pass through."""
    spellings = key_spellings()
    return {spellings.get(key, key): value for key, value in flat.items()}


def flatten_config(config: RunConfig) -> dict[str, str]:
    """Every effective key with its string value, keys sorted."""
    flat = {key: _format(getattr(config, key)) for key in TOP_LEVEL}
    for section in SECTIONS:
        for key, value in getattr(config, section).model_dump(by_alias=True).items():
            flat[f"{section}.{key}"] = _format(value)
    return dict(sorted(flat.items()))


def unflatten_config(flat: Mapping[str, str | None]) -> RunConfig:
    """Validate a flat mapping into a RunConfig; unknown keys are an error."""
    unknown = sorted(set(flat) - known_keys())
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    flat = canonical(flat)
    nested: dict[str, Any] = {section: {} for section in SECTIONS}
    for key, value in flat.items():
        value = "" if value is None else value
        if "." in key:
            section, name = key.split(".", 1)
            nested[section][name] = value
        else:
            nested[key] = value
    return RunConfig.model_validate(nested)


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    """``key=value`` strings to a dict keyed by canonical spelling.

    The same key with different values is a conflict, whichever spelling was used.
    """
    spellings = key_spellings()
    overrides: dict[str, str] = {}
    conflicts: dict[str, set[str]] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        key = spellings.get(key, key)
        if key in overrides and overrides[key] != value:
            conflicts.setdefault(key, {overrides[key]}).add(value)
        overrides[key] = value
    if conflicts:
        listed = "; ".join(f"{k}: {', '.join(sorted(v))}" for k, v in sorted(conflicts.items()))
        raise ConfigError(f"conflicting overrides: {listed}")
    return overrides


def load_run_config(path: Path | None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file, then ``--set`` overrides."""
    flat: dict[str, str | None] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        flat.update(canonical(dotenv_values(path)))
    flat.update(canonical(parse_overrides(overrides)))
    return unflatten_config(flat)


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Copy of ``config`` with dotted-key overrides applied and re-validated."""
    flat: dict[str, str | None] = dict(flatten_config(config))
    flat.update(canonical({key: _format(value) for key, value in overrides.items()}))
    return unflatten_config(flat)


def write_echo(config: RunConfig, out_dir: Path) -> Path:
    """Write the effective config to ``out_dir/config.echo`` (sorted, same flat format)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / ECHO_FILE
    path.write_text("".join(f"{key}={value}\n" for key, value in flatten_config(config).items()))
    logger.info("effective config written to %s", path)
    return path
