"""Exception hierarchy shared by every fblab module."""


class FbLabError(Exception):
    """Base class for all fblab errors."""


class ConfigError(FbLabError, ValueError):
    """Malformed input: bad shapes, invalid probabilities, unknown config keys."""

    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column

    def __str__(self):
        msg = super().__str__()
        if self.line is not None:
            return f"line {self.line}, column {self.column or 1}: {msg}"
        return msg


class NumericError(FbLabError, ArithmeticError):
    """A computation produced or received non-finite or singular values."""


class ConvergenceError(NumericError):
    """An iterative solver hit its iteration cap."""


class InversionError(NumericError):
    """A matrix that must be inverted is singular or ill-conditioned."""


class UsageError(FbLabError, ValueError):
    """An API was called with arguments violating its preconditions."""


class FormatError(FbLabError, ValueError):
    """A checkpoint or CMP file could not be parsed."""


class SearchFailure(FbLabError):
    """A randomized search exhausted its budget without success."""


class TrainingAborted(NumericError):
    """Training hit a non-finite loss; carries the metrics gathered so far."""

    def __init__(self, message, records=(), last_good_step=None):
        super().__init__(message)
        self.records = list(records)
        self.last_good_step = last_good_step
