"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class QSDError(Exception):
    """Base class for all package errors."""


class ParameterError(QSDError, ValueError):
    """A numeric argument lies outside its mathematical domain."""


class ShapeError(QSDError, ValueError):
    pass


class NumericError(QSDError, ArithmeticError):
    """Non-finite values appeared during a computation.

    ``layer`` holds the zero-based hidden layer index when known.
    """

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class DataFormatError(QSDError, ValueError):
    """Input file contents do not match the expected format."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class UsageError(QSDError, RuntimeError):
    """An API was called in the wrong state or with insufficient data."""


class ConfigError(QSDError, ValueError):
    """One or more problems found while validating an experiment config."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))
