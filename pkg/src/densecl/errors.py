"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DenseCLError(Exception):
    exit_code = 1


class ConfigError(DenseCLError, ValueError):
    exit_code = 2


class DataError(DenseCLError):
    exit_code = 3


class ShapeError(DenseCLError, ValueError):
    exit_code = 2


class NumericError(DenseCLError, ArithmeticError):
    exit_code = 4


class DegenerateInputError(NumericError):
    """Zero-norm vector where a direction is required."""


class QueueContractError(DenseCLError, ValueError):
    """Key handed to a queue is not unit-norm."""
    exit_code = 4


class StorageError(DenseCLError, OSError):
    """Unreadable or unwritable file."""
    exit_code = 5


class CheckpointError(StorageError):

    def __init__(self, msg, field=None):
        super().__init__(msg if field is None else f"{field}: {msg}")
        self.field = field
