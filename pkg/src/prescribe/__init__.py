"""Multivariate deep evidential regression for perturbation-response prediction."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DataFormatError,
    DivergenceError,
    DomainError,
    IndefiniteMatrixError,
    NumericalError,
    PrescribeError,
)

__all__ = [
    "__version__",
    "DataFormatError",
    "DivergenceError",
    "DomainError",
    "IndefiniteMatrixError",
    "NumericalError",
    "PrescribeError",
]
