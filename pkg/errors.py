"""
Exception hierarchy shared by the simulation modules, the CLI and the API.

Each class carries the process exit code and HTTP status it maps to.
"""

from typing import Optional


class SpectroscopyError(Exception):
    """Base class for all errors raised on purpose by this package"""

    exit_code = 1
    http_status = 500


class ConfigError(SpectroscopyError, ValueError):
    """Invalid configuration or invalid operation arguments"""

    exit_code = 2
    http_status = 400


class DataError(SpectroscopyError, ValueError):
    """Malformed or unusable data (CSV input, sweeps, profiles)"""

    exit_code = 3
    http_status = 422

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class NumericalError(SpectroscopyError, ArithmeticError):
    """A numerical procedure could not produce a meaningful result"""

    exit_code = 4
    http_status = 500
