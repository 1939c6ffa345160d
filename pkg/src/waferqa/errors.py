"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class InputError(ValueError):
    """A caller passed a value outside an operation's domain."""


class ShapeError(InputError):
    """Array or tensor shapes do not line up."""


class DataError(RuntimeError):
    """On-disk or in-memory sample data is missing or malformed."""


class FormatError(RuntimeError):
    """A checkpoint or serialized artifact could not be parsed."""


class NumericError(FloatingPointError):
    """A loss term or metric became non-finite."""

    def __init__(self, message: str, term: str | None = None, step: int | None = None):
        super().__init__(message)
        self.term = term
        self.step = step


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. one class only)."""
