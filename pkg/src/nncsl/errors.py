"""Exception hierarchy shared by every module in the package."""


class NNCSLError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(NNCSLError, ValueError):
    pass


class ParameterError(NNCSLError, ValueError):
    pass


class DomainError(NNCSLError, ValueError):
    pass


class DegenerateMaskError(NNCSLError, ValueError):
    pass


class DegenerateSupportError(NNCSLError, ValueError):
    pass


class EmptyFilterError(NNCSLError):
    """Raised when a support filter leaves no rows; callers usually skip the loss."""


class BackwardError(NNCSLError, RuntimeError):
    pass


class ProtocolError(NNCSLError):
    pass


class SplitError(NNCSLError, ValueError):
    pass


class IngestionError(NNCSLError, ValueError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DivergenceError(NNCSLError, FloatingPointError):
    def __init__(self, message, task=None, step=None, parts=None):
        super().__init__(message)
        self.task = task
        self.step = step
        self.parts = parts or {}


class StateError(NNCSLError):
    pass


class UndefinedMetricError(NNCSLError, ValueError):
    pass


class ConfigError(NNCSLError, ValueError):
    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field
