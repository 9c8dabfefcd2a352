"""Exception hierarchy; each class maps to a stable CLI exit code."""


class VQPurifyError(Exception):
    exit_code = 1


class ConfigError(VQPurifyError, ValueError):
    exit_code = 1


class DimensionError(VQPurifyError, ValueError):
    exit_code = 1


class ContractError(VQPurifyError, RuntimeError):
    exit_code = 1


class DataError(VQPurifyError, ValueError):
    exit_code = 2


class FormatError(DataError):
    exit_code = 2


class NumericalError(VQPurifyError, ArithmeticError):
    """A loss or gradient went non-finite; ``batch`` names the offending batch."""

    exit_code = 3

    def __init__(self, message: str, batch: int | None = None, epoch: int | None = None):
        super().__init__(message)
        self.batch = batch
        self.epoch = epoch
