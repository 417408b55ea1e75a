"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and data validation
problems exit 1, runtime failures (numeric blow-ups, illegal state) exit 2.
"""


class AdaclError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(AdaclError):
    """A config document, argument combination, or search space is invalid."""


class ValidationError(AdaclError):
    """Input data violates a precondition (shapes are handled separately)."""


class StreamFormatError(ValidationError):
    """A stream file could not be parsed; carries a 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(ValidationError):
    """Array dimensions do not match what an operation requires."""


class NumericFailureError(AdaclError):
    """A computation produced a non-finite value or degenerate scale."""


class StateError(AdaclError):
    """An operation was called in a state where its result is undefined."""


class MetricUndefinedError(StateError):
    """A metric has no value for the given inputs (e.g. a single-task run)."""
