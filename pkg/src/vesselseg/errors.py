"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class VesselSegError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(VesselSegError):
    """Invalid configuration: unknown key, bad value, usage error."""


class DataError(VesselSegError):
    """Bad input data: annotations, images, masks, weight files."""


class AnnotationError(DataError):
    """Malformed or invalid annotation input."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(DataError):
    """Tensor/array shape mismatch; message names the offending dimensions."""


class NumericError(VesselSegError):
    """Non-finite value where a finite one is required."""
