"""Exception hierarchy shared by the estimation modules."""


class TSBCError(Exception):
    """Base class for all package errors."""


class StructuralError(TSBCError, ValueError):
    """Parameter vector and partition do not fit together."""


class DomainError(TSBCError, ValueError):
    """Parameters fall outside the region where a data-generating algorithm is defined."""


class DataError(TSBCError, ValueError):
    """Input data cannot be used by a fitting routine."""


class UnderidentifiedError(DataError):
    """A measurement block has too few indicators to identify the model."""


class BoundaryError(DataError):
    """An item shows a single response category, so its parameters are unbounded."""


class NumericalError(TSBCError, ArithmeticError):
    """A numerical routine failed (singular system, failed bracketing, ...)."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InferenceError(NumericalError):
    """The Jacobian of the expectation map is too ill-conditioned to invert."""


class DivergenceError(NumericalError):
    """A stochastic-approximation run left the numerically sane region.

    The partial trace is attached as ``trace`` so callers can inspect it.
    """

    def __init__(self, message, trace=None, diagnostics=None):
        super().__init__(message, diagnostics)
        self.trace = trace
