"""Exception types raised across the package."""


class PrescribeError(Exception):
    """Base class for all package errors."""


class DomainError(PrescribeError, ValueError):
    """An argument lies outside the domain of a closed-form expression."""


class NumericalError(PrescribeError, ArithmeticError):
    """A numerical routine failed (non-finite values, failed factorization)."""


class IndefiniteMatrixError(NumericalError):
    """Cholesky factorization failed even after exhausting the jitter ladder."""


class DivergenceError(NumericalError):
    """Training produced non-finite losses on consecutive steps."""


class DataFormatError(PrescribeError, ValueError):
    """An on-disk dataset, checkpoint or prediction file is malformed."""
