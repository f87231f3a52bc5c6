"""Exception types shared across the package."""


class NclabError(Exception):
    """Base class for package errors."""


class ValidationError(NclabError, ValueError):
    """Input failed a structural check."""


class AperiodicityError(ValidationError):
    """Return times share a common divisor larger than one."""


class TailError(ValidationError):
    """Exponential tail bound is violated."""


class ConvergenceError(NclabError, RuntimeError):
    """An iteration did not reach its tolerance.

    The last residual is kept on ``residual``.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegeneracyError(NclabError, ValueError):
    """Asymptotic variance vanishes so a limit statement cannot be tested."""


class UnsupportedError(NclabError, NotImplementedError):
    """Requested combination is outside what the code handles."""
