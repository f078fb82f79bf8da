"""Utilities package for Wassprox."""

from wassprox.utils.validators import (
    BudgetExceededError,
    HypothesisError,
    NumericalError,
    ProbeError,
    ValidationError,
)

__all__ = [
    "ValidationError",
    "HypothesisError",
    "ProbeError",
    "NumericalError",
    "BudgetExceededError",
]
