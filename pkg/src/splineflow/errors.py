"""Exception types shared across the package."""


class SplineFlowError(Exception):
    """Base class for all package errors."""


class InvalidParameter(SplineFlowError, ValueError):
    pass


class NumericalError(SplineFlowError, ArithmeticError):
    """A computation produced a non-finite or otherwise impossible value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ShapeError(SplineFlowError, ValueError):
    pass


class GraphError(SplineFlowError, RuntimeError):
    """Raised when backpropagation is requested for a value not on the tape."""


class ParseError(SplineFlowError, ValueError):
    pass


class ConfigError(SplineFlowError, ValueError):
    pass
