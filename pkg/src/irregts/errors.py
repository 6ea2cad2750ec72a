"""Exception types shared across the package."""


class IrregTSError(Exception):
    """Base class for all package errors."""


class DimensionError(IrregTSError, ValueError):
    """Array shapes do not conform."""


class NumericError(IrregTSError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class NumericDivergenceError(NumericError):
    """An ODE solve left the bounded region."""


class EmptyBatchError(IrregTSError, ValueError):
    pass


class EmptyInputError(IrregTSError, ValueError):
    pass


class StateError(IrregTSError, RuntimeError):
    """An operation was called without the state it depends on."""


class OrderingError(IrregTSError, ValueError):
    pass


class ConfigError(IrregTSError, ValueError):
    pass


class LabelError(IrregTSError, ValueError):
    pass


class ParseError(IrregTSError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(IrregTSError, ValueError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, batch_index, loss):
        super().__init__(f"training diverged at batch {batch_index} (loss={loss})")
        self.batch_index = batch_index
        self.loss = loss
