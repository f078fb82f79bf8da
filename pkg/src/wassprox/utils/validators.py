"""Input validators and the exception family for Wassprox."""

from collections.abc import Iterable
from typing import Any

import numpy as np


class ValidationError(Exception):
    """Raised when validation fails."""

    pass


class HypothesisError(ValidationError):
    """Raised when a certification precondition does not hold."""

    pass


class ProbeError(ValidationError):
    """Raised when a checker probe has inconsistent marginals."""

    pass


class NumericalError(Exception):
    """Raised when a numerical routine cannot produce a trustworthy result."""

    pass


class BudgetExceededError(NumericalError):
    """Raised when an exhaustive search is larger than its budget."""

    def __init__(self, required: int, budget: int) -> None:
        self.required = required
        self.budget = budget
        super().__init__(
            f"Search needs {required} control sequences but the budget is {budget}. "
            f"Raise the budget to at least {required} or use fewer steps."
        )


def validate_finite_array(values: Any, name: str, ndim: int) -> np.ndarray:
    """Convert to a float array of the given rank and reject non-finite entries.

    Args:
        values: Array-like input.
        name: Name used in error messages.
        ndim: Required number of dimensions.

    Returns:
        A float64 copy of the input.

    Raises:
        ValidationError: If the shape is wrong or an entry is NaN or infinite.
    """
    try:
        array = np.array(values, dtype=float)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"Invalid {name}: cannot convert to numbers ({e}).") from e

    if array.ndim != ndim:
        raise ValidationError(
            f"Invalid {name}: expected {ndim}-dimensional data, got shape {array.shape}."
        )
    if not np.all(np.isfinite(array)):
        raise ValidationError(f"Invalid {name}: all entries must be finite.")

    return array


def validate_probability_vector(values: Any, name: str, tol: float) -> np.ndarray:
    """Validate a vector of nonnegative masses summing to one.

    Args:
        values: Array-like of masses.
        name: Name used in error messages.
        tol: Allowed deviation of the total from 1.

    Returns:
        The masses as a float array.

    Raises:
        ValidationError: If a mass is negative or the total is off by more than tol.
    """
    masses = validate_finite_array(values, name, ndim=1)

    if masses.size == 0:
        raise ValidationError(f"Invalid {name}: at least one entry is required.")
    if np.any(masses < 0):
        raise ValidationError(f"Invalid {name}: entries must be nonnegative.")

    total = float(masses.sum())
    if abs(total - 1.0) > tol:
        raise ValidationError(f"Invalid {name}: entries sum to {total!r}, expected 1.")

    return masses


def validate_positive(value: float, name: str) -> float:
    """Validate a strictly positive finite real."""
    number = float(value)
    if not np.isfinite(number) or number <= 0:
        raise ValidationError(f"Invalid {name}: '{value}'. Must be a positive number.")
    return number


def validate_nonnegative(value: float, name: str) -> float:
    """Validate a nonnegative finite real."""
    number = float(value)
    if not np.isfinite(number) or number < 0:
        raise ValidationError(f"Invalid {name}: '{value}'. Must be a nonnegative number.")
    return number


def validate_time_window(start: float, end: float) -> tuple[float, float]:
    """Validate an ordered time window start <= end.

    Raises:
        ValidationError: If either end is not finite or the window is reversed.
    """
    s, r = float(start), float(end)
    if not (np.isfinite(s) and np.isfinite(r)):
        raise ValidationError(f"Invalid time window: [{start}, {end}] must be finite.")
    if s > r:
        raise ValidationError(f"Invalid time window: start {start} is after end {end}.")
    return s, r


def validate_choice(value: str, valid: Iterable[str], name: str) -> str:
    """Validate and normalize a keyword against a fixed set of options.

    Args:
        value: The keyword to validate.
        valid: Accepted (lowercase) options.
        name: Name used in error messages.

    Returns:
        The normalized keyword.

    Raises:
        ValidationError: If the keyword is not one of the options.
    """
    options = set(valid)
    normalized = str(value).lower().strip()
    if normalized not in options:
        raise ValidationError(
            f"Invalid {name}: '{value}'. Valid options are: {', '.join(sorted(options))}"
        )
    return normalized


def validate_sign(sign: str) -> str:
    """Validate the envelope side: 'sub' for inf-convolutions, 'super' for sup-convolutions."""
    return validate_choice(sign, {"sub", "super"}, "sign")


def validate_unknown_keys(data: dict[str, Any], allowed: Iterable[str], section: str) -> None:
    """Reject configuration keys that are not part of a section's schema.

    Raises:
        ValidationError: Naming the first unknown key and the section.
    """
    allowed_keys = set(allowed)
    unknown = sorted(set(data) - allowed_keys)
    if unknown:
        raise ValidationError(
            f"Unknown key '{unknown[0]}' in section '{section}'. "
            f"Valid keys are: {', '.join(sorted(allowed_keys))}"
        )
