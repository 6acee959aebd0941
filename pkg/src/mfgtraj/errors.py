"""Exception types shared across the package."""


class MfgError(Exception):
    """Base class for all package-specific errors."""


class InvalidArgumentError(MfgError, ValueError):
    """An input violates a documented precondition."""


class InvalidModelError(MfgError, ValueError):
    """A cost model produced non-finite values or is missing required data."""


class NumericalFailureError(MfgError, RuntimeError):
    """An iterative routine failed to converge.

    Carries a ``diagnostics`` dict with the last iterate and solver state so
    callers can report what happened instead of hiding it.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
