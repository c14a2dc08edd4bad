"""Exception hierarchy shared by every module and the command line."""
from typing import Optional


class DPQError(Exception):
    """Base error. ``code`` is machine-readable, ``exit_code`` is what the CLI returns."""

    code = "error"
    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        text = " ".join(str(self.message).split())
        return f"error code={self.code} exit={self.exit_code} message={text}"


class ConfigError(DPQError):
    code = "config"
    exit_code = 3


class InputError(DPQError):
    code = "input"
    exit_code = 4


class FormatError(DPQError):
    code = "format"
    exit_code = 5

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class DimensionError(DPQError):
    code = "dimension"
    exit_code = 3


class NumericError(DPQError):
    code = "numeric"
    exit_code = 6


class TrainingError(NumericError):
    code = "training"

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


class DegenerateInputError(DPQError):
    code = "degenerate_input"
    exit_code = 4


class BatchTooSmallError(DPQError):
    code = "batch_too_small"
    exit_code = 4


class InfeasibleError(DPQError):
    code = "infeasible"
    exit_code = 7


class InfeasibleBudgetError(InfeasibleError):
    code = "infeasible_budget"


class IntegrityError(DPQError):
    code = "integrity"
    exit_code = 8


class StateError(DPQError):
    code = "state"
    exit_code = 9


class UsageError(DPQError):
    code = "usage"
    exit_code = 2
