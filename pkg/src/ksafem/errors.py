"""Exception types shared across the package."""


class KsafemError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(KsafemError, ValueError):
    """Arguments violate a documented precondition."""


class ContractViolation(KsafemError):
    """A computed quantity left its documented range."""


class NumericalFailure(KsafemError, ArithmeticError):
    """Non-finite intermediate or a solver that failed to converge.

    ``term`` names the energy term or solver stage that failed, when known.
    """

    def __init__(self, message: str, term: str | None = None, diagnostics=None):
        super().__init__(message)
        self.term = term
        self.diagnostics = diagnostics


class ConvergenceError(NumericalFailure):
    """Iterative solver stopped before reaching its tolerance."""
