"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DasError(Exception):
    exit_code = 1


class ParameterError(DasError, ValueError):
    exit_code = 2


class ShapeError(DasError, ValueError):
    exit_code = 2


class ConfigurationError(DasError, ValueError):
    exit_code = 2


class FormatError(DasError):
    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CapacityError(DasError):
    exit_code = 3


class SingularityError(DasError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class TrainingDiverged(DasError, ArithmeticError):
    exit_code = 4

    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class UndefinedCorrelation(DasError, ArithmeticError):
    """A rank or linear correlation of a constant vector."""

    exit_code = 4
