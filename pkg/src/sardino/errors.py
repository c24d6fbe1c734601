"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError and
FormatError -> 3, NumericError (incl. CollapseError) -> 4.
"""


class SardinoError(Exception):
    """Base class for all package errors."""


class ShapeError(SardinoError):
    """Tensor/layer dimension mismatch."""


class StateError(SardinoError):
    """Invalid object state (e.g. reusing a consumed tape)."""


class ConfigError(SardinoError):
    """Invalid configuration value, key, or combination."""


class DataError(SardinoError):
    """Bad or missing input data (labels, splits, empty sets)."""


class FormatError(SardinoError):
    """Corrupt or unsupported on-disk format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(SardinoError):
    """Non-finite values where finite ones are required."""


class CollapseError(NumericError):
    """Pre-training diagnostics detected representation collapse."""
