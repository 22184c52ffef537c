"""Exception hierarchy shared by every crisscross-eeg module.

Each family maps to one CLI exit code, so callers can tell a bad config file
from a diverging training run or a corrupt container.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class CrissCrossError(Exception):
    """Base class for all package errors."""

    exit_code: int = 1


class ConfigError(CrissCrossError, ValueError):
    """Invalid configuration value, unknown key, or config/checkpoint mismatch."""

    exit_code = EXIT_CONFIG


class ShapeError(ConfigError):
    """A tensor or grid does not have the shape its configuration implies."""


class DataError(CrissCrossError, ValueError):
    """Input data violates an invariant (NaN values, empty sets, bad labels)."""

    exit_code = EXIT_CONFIG


class NumericError(CrissCrossError, ArithmeticError):
    """Non-finite loss or gradient, or a metric that is undefined for its input."""

    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, tensor_name: str | None = None):
        super().__init__(message)
        self.tensor_name = tensor_name


class ContainerError(CrissCrossError, OSError):
    """Missing, truncated or unsupported on-disk container."""

    exit_code = EXIT_IO


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code contract."""
    if isinstance(exc, CrissCrossError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return EXIT_IO
    return 1
