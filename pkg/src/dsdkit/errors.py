"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""

from __future__ import annotations


class DSDError(Exception):
    exit_code = 1


class ConfigError(DSDError, ValueError):
    exit_code = 2


class FormatError(DSDError, ValueError):
    exit_code = 3


class ParseError(FormatError):
    """A well-formed file holding an invalid value (bad enum, bad number)."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ShapeError(FormatError):
    pass


class IntegrityError(DSDError, ValueError):
    exit_code = 4


class NumericError(DSDError, ArithmeticError):
    exit_code = 5


class MetricError(NumericError, ValueError):
    """Metric undefined for the given input (e.g. only one class present)."""


class DegeneracyError(NumericError):
    pass


class StateError(DSDError, RuntimeError):
    exit_code = 6


class TrainingError(StateError):
    pass
