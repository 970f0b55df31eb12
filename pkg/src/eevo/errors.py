"""Exception hierarchy shared across the engine.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented status codes without inspecting messages.
"""

from __future__ import annotations


class EevoError(Exception):
    exit_code = 4


class InvalidInputError(EevoError, ValueError):
    """Rejected input: bad shape, out-of-range index, invalid parameter."""

    exit_code = 2


class ConfigError(InvalidInputError):
    """A model config or exit policy violates its invariants."""


class CapacityError(EevoError):
    """Sequence would exceed the model's ``max_seq``."""

    exit_code = 4


class NumericError(EevoError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""

    exit_code = 4


class WeightFormatError(EevoError):
    """Base for weight-file parse failures. ``field`` names the culprit."""

    exit_code = 3

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class BadMagicError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class ShapeMismatchError(WeightFormatError):
    pass


class HeaderConfigError(WeightFormatError):
    """Header parsed but the config it describes is invalid (e.g. L=0)."""
