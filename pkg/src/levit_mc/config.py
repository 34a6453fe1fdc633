"""Layered run configuration: defaults, a YAML file, then `--key=value` overrides."""

from __future__ import annotations

import dataclasses
import logging
import os

from typing import TYPE_CHECKING, Any

import yaml

from levit_mc.errors import UsageError
from levit_mc.evaluation import BenchConfig
from levit_mc.models.densenet import DenseNetConfig
from levit_mc.models.levit import LeViTConfig
from levit_mc.train import TrainConfig


if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence
    from pathlib import Path


LOGGER = logging.getLogger(__name__)

SEED_ENV = "LMCK_SEED"
SECTIONS: dict[str, type[Any]] = {
    "densenet": DenseNetConfig,
    "levit": LeViTConfig,
    "train": TrainConfig,
    "bench": BenchConfig,
}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_names(section: str) -> set[str]:
    return {field.name for field in dataclasses.fields(SECTIONS[section])}


def load_file(path: Path | None) -> dict[str, dict[str, Any]]:
    """Read a YAML config file.

    Args:
        path: The file; None for an empty layer.

    Returns:
        Values per section.

    Raises:
        UsageError: If the file has unknown sections or keys, or is not a mapping.
    """
    if path is None:
        return {}
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        err = f"cannot read config {path}: {exc.strerror or exc}"
        raise UsageError(err) from exc
    except yaml.YAMLError as exc:
        err = f"config {path} is not valid YAML: {exc}"
        raise UsageError(err) from exc
    if not isinstance(data, dict):
        err = f"config {path} must be a mapping of sections"
        raise UsageError(err)
    for section, values in data.items():
        if section not in SECTIONS:
            err = f"unknown config section {section!r}, expected one of {sorted(SECTIONS)}"
            raise UsageError(err)
        if not isinstance(values, dict):
            err = f"config section {section!r} must be a mapping"
            raise UsageError(err)
        unknown = set(values) - _field_names(section)
        if unknown:
            err = f"unknown {section} keys: {', '.join(sorted(unknown))}"
            raise UsageError(err)
    return {section: dict(values) for section, values in data.items()}


def coerce(text: str, default: Any) -> Any:  # noqa: ANN401
    """Convert an override string to the type of a field default.

    Sequences accept `a,b,c` or a YAML flow sequence `[a, b, c]`.

    Args:
        text: The raw value.
        default: The field default.

    Returns:
        The converted value.

    Raises:
        UsageError: If the text does not parse as the default's type.
    """
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in _TRUE | _FALSE:
                raise ValueError(text)  # noqa: TRY301
            return lowered in _TRUE
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple | list):
            items = yaml.safe_load(text) if text.startswith("[") else text.split(",")
            element = default[0] if default else ""
            return tuple(coerce(str(item).strip(), element) for item in items if str(item).strip())
    except (ValueError, yaml.YAMLError) as exc:
        err = f"cannot read {text!r} as {type(default).__name__}"
        raise UsageError(err) from exc
    return text


def parse_overrides(
    tokens: Iterable[str],
    sections: Sequence[str],
) -> dict[str, dict[str, Any]]:
    """Turn `--key=value` tokens into per-section string values.

    A key is either `section.field` or a bare field, which applies to every
    listed section that has it. Dashes in keys read as underscores.

    Args:
        tokens: Unparsed command-line tokens.
        sections: Sections the running command reads.

    Returns:
        Raw override strings per section.

    Raises:
        UsageError: On a malformed token or a key no listed section has.
    """
    overrides: dict[str, dict[str, Any]] = {}
    for token in tokens:
        if not token.startswith("--") or "=" not in token:
            err = f"unrecognized argument {token!r}"
            raise UsageError(err)
        key, value = token[2:].split("=", 1)
        key = key.replace("-", "_")
        if "." in key:
            section, name = key.split(".", 1)
            targets = [section] if section in sections and name in _field_names(section) else []
        else:
            name = key
            targets = [section for section in sections if name in _field_names(section)]
        if not targets:
            err = f"unknown key {key!r} for sections {', '.join(sections)}"
            raise UsageError(err)
        for section in targets:
            overrides.setdefault(section, {})[name] = value
    return overrides


def build_config(
    section: str,
    file_layer: Mapping[str, Mapping[str, Any]],
    overrides: Mapping[str, Mapping[str, Any]],
    **explicit: Any,  # noqa: ANN401
) -> Any:  # noqa: ANN401
    """Resolve one section through every layer.

    Args:
        section: Section name.
        file_layer: Values from the config file.
        overrides: Raw `--key=value` strings.
        explicit: Values of dedicated flags; None leaves the lower layers in place.

    Returns:
        The validated config dataclass.
    """
    cls = SECTIONS[section]
    defaults = {field.name: getattr(cls(), field.name) for field in dataclasses.fields(cls)}
    values = dict(defaults)
    for key, value in file_layer.get(section, {}).items():
        values[key] = tuple(value) if isinstance(value, list) else value
    for key, value in overrides.get(section, {}).items():
        values[key] = coerce(value, defaults[key])
    values.update({key: value for key, value in explicit.items() if value is not None})
    changed = {key: value for key, value in values.items() if value != defaults[key]}
    if changed:
        LOGGER.debug("%s config differs from defaults: %s", section, changed)
    return cls(**values)


def env_seed(seed: int | None) -> int | None:
    """The seed given on the command line, else `LMCK_SEED`.

    Args:
        seed: Value of `--seed`.

    Returns:
        The seed, None when neither is set.

    Raises:
        UsageError: If `LMCK_SEED` is not an integer.
    """
    if seed is not None:
        return seed
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        err = f"{SEED_ENV} must be an integer, got {raw!r}"
        raise UsageError(err) from exc


def resolve_seed(seed: int | None, default: int = 0) -> int:
    """The run seed: the flag, else `LMCK_SEED`, else `default`.

    Args:
        seed: Value of `--seed`.
        default: Seed used when neither is set.

    Returns:
        The seed.
    """
    found = env_seed(seed)
    return default if found is None else found
