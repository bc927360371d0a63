"""Plain-text ``key = value`` config files and environment fallbacks."""

from __future__ import annotations

import os
from collections.abc import Collection
from pathlib import Path

import torch

from geostyle.base.errors import ConfigurationError, ImageIOError

ENV_BACKBONE_WEIGHTS = "GEOSTYLE_BACKBONE_WEIGHTS"
ENV_DEVICE = "GEOSTYLE_DEVICE"


def parse_config_text(text: str, allowed_keys: Collection[str] | None = None) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored.

    Keys are normalized to lowercase with dashes turned into underscores, so
    ``alpha-over-beta`` and ``alpha_over_beta`` name the same setting.

    Raises:
        ConfigurationError: On malformed lines, duplicate keys or keys outside ``allowed_keys``.
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"Line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key = key.strip().lower().replace("-", "_")
        if not key:
            raise ConfigurationError(f"Line {lineno}: empty key")
        if allowed_keys is not None and key not in allowed_keys:
            valid = ", ".join(sorted(allowed_keys))
            raise ConfigurationError(f"Line {lineno}: unknown key '{key}'. Valid keys: {valid}")
        if key in values:
            raise ConfigurationError(f"Line {lineno}: duplicate key '{key}'")
        values[key] = value.strip()
    return values


def load_config_file(
    path: Path | str, allowed_keys: Collection[str] | None = None
) -> dict[str, str]:
    """Read and parse a config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ImageIOError(f"Cannot read config file {path}: {e}") from e
    return parse_config_text(text, allowed_keys)


def get_setting(key: str, overrides: dict[str, str] | None = None) -> str | None:
    """Get a setting from the override dict or the environment."""
    if overrides and key in overrides:
        return overrides[key]
    return os.environ.get(key)


def resolve_device(name: str | None) -> torch.device:
    """Map a device string (``auto`` picks CUDA when available) to a torch device."""
    name = name or get_setting(ENV_DEVICE) or "cpu"
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    try:
        return torch.device(name)
    except RuntimeError as e:
        raise ConfigurationError(f"Unknown device '{name}': {e}") from e
