"""Exception hierarchy shared by all geostyle modules.

Each error carries a short ``category`` string that the CLI prints so callers
can tell failures apart without parsing messages.
"""

from __future__ import annotations

from typing import ClassVar


class GeostyleError(Exception):
    """Base class for all geostyle errors."""

    category: ClassVar[str] = "error"


class ImageIOError(GeostyleError, OSError):
    """An image or checkpoint file could not be read or written."""

    category: ClassVar[str] = "io"


class ImageFormatError(GeostyleError, ValueError):
    """A file exists but does not decode as a supported image."""

    category: ClassVar[str] = "format"


class ArgumentError(GeostyleError, ValueError):
    """An argument has the wrong shape, size or value."""

    category: ClassVar[str] = "argument"


class ConfigurationError(GeostyleError, ValueError):
    """A config file or sampler configuration cannot be used."""

    category: ClassVar[str] = "config"


class PreconditionError(GeostyleError, ValueError):
    """An operation was called before its inputs were ready."""

    category: ClassVar[str] = "precondition"


class StateError(GeostyleError, RuntimeError):
    """Required state (checkpoint, trained weights, style bank) is missing."""

    category: ClassVar[str] = "state"


class BackboneInitError(GeostyleError, RuntimeError):
    """Backbone weights are unavailable or do not match the expected digest."""

    category: ClassVar[str] = "init"


class NonFiniteLossError(GeostyleError, FloatingPointError):
    """An optimization produced a NaN or infinite loss."""

    category: ClassVar[str] = "numeric"
