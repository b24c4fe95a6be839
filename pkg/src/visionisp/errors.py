"""Exception hierarchy shared by every block and mapped to CLI exit codes."""


class VisionIspError(Exception):
    exit_code = 1


class ConfigError(VisionIspError, ValueError):
    """Invalid parameters, schema violations, unsupported combinations."""

    exit_code = 2

    def __init__(self, message, pointer=None):
        if pointer:
            message = f"{pointer}: {message}"
        super().__init__(message)
        self.pointer = pointer


class ShapeError(VisionIspError, ValueError):
    exit_code = 2


class DomainError(VisionIspError, ValueError):
    exit_code = 2


class InputError(VisionIspError, OSError):
    exit_code = 3


class NumericError(VisionIspError, ArithmeticError):
    exit_code = 4


class MetricError(NumericError):
    """Metric undefined for the given labels (e.g. no positives)."""
