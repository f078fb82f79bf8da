"""Library of named control models used by scenarios and tests."""

import itertools
from typing import Any, Callable

import numpy as np

from wassprox.dynamics_engine import ControlModel
from wassprox.measure_core import ParticleMeasure
from wassprox.utils.validators import ValidationError, validate_positive


def _second_moment(m: ParticleMeasure) -> float:
    return float(m.weights @ np.einsum("ij,ij->i", m.points, m.points))


def _zero_cost(t: float, m: ParticleMeasure, u: np.ndarray) -> float:
    return 0.0


def unit_controls(dimension: int) -> np.ndarray:
    """The grid {-1, 0, 1}^d with the resting control first, first coordinate varying slowest."""
    return np.array(list(itertools.product((0.0, -1.0, 1.0), repeat=dimension)))


def translation_value(horizon: float) -> Callable[[float, ParticleMeasure], float]:
    """Closed-form value of the translation benchmark.

    Every particle receives the same control, so after time tau = T - s the
    reachable displacements form the box [-tau, tau]^d and the optimal terminal
    cost is the variance plus the squared excess of the mean outside that box.
    """

    def value(s: float, m: ParticleMeasure) -> float:
        tau = max(horizon - s, 0.0)
        mean = m.mean()
        centered = m.points - mean
        variance = float(m.weights @ np.einsum("ij,ij->i", centered, centered))
        excess = np.maximum(np.abs(mean) - tau, 0.0)
        return variance + float(excess @ excess)

    return value


def zero_drift(dimension: int = 1, horizon: float = 1.0) -> ControlModel:
    """f = 0, L = 0, G = second moment."""
    return ControlModel(
        name="zero_drift",
        dimension=dimension,
        horizon=horizon,
        controls=unit_controls(dimension),
        drift=lambda t, x, m, u: np.zeros_like(x),
        running_cost=_zero_cost,
        terminal_cost=_second_moment,
        c_f=0.0,
        c_l=0.0,
        c_1=0.0,
        running_cost_floor=0.0,
        terminal_cost_floor=0.0,
        exact_value=lambda s, m: _second_moment(m),
    )


def translation(dimension: int = 1, horizon: float = 1.0) -> ControlModel:
    """The analytic benchmark: f = u over {-1, 0, 1}^d, L = 0, G = second moment."""
    return ControlModel(
        name="translation",
        dimension=dimension,
        horizon=horizon,
        controls=unit_controls(dimension),
        drift=lambda t, x, m, u: np.broadcast_to(u, x.shape).astype(float),
        running_cost=_zero_cost,
        terminal_cost=_second_moment,
        c_f=0.0,
        c_l=0.0,
        c_1=float(np.sqrt(dimension)),
        running_cost_floor=0.0,
        terminal_cost_floor=0.0,
        exact_value=translation_value(horizon),
    )


def contraction(dimension: int = 1, horizon: float = 1.0) -> ControlModel:
    """f = -x with a single control, L = 0, G = second moment."""
    return ControlModel(
        name="contraction",
        dimension=dimension,
        horizon=horizon,
        controls=np.zeros((1, dimension)),
        drift=lambda t, x, m, u: -x,
        running_cost=_zero_cost,
        terminal_cost=_second_moment,
        c_f=1.0,
        c_l=0.0,
        c_1=1.0,
        running_cost_floor=0.0,
        terminal_cost_floor=0.0,
        exact_value=lambda s, m: float(np.exp(-2.0 * (horizon - s))) * _second_moment(m),
    )


def aggregation(
    dimension: int = 1, horizon: float = 1.0, strength: float = 1.0
) -> ControlModel:
    """f = u + strength * (mean(m) - x): controlled drift plus attraction to the mean."""
    strength = validate_positive(strength, "strength")
    return ControlModel(
        name="aggregation",
        dimension=dimension,
        horizon=horizon,
        controls=unit_controls(dimension),
        drift=lambda t, x, m, u: u + strength * (m.mean() - x),
        running_cost=_zero_cost,
        terminal_cost=_second_moment,
        c_f=strength,
        c_l=0.0,
        c_1=float(np.sqrt(dimension)) + strength,
        running_cost_floor=0.0,
        terminal_cost_floor=0.0,
    )


def tracking(
    dimension: int = 1, horizon: float = 1.0, effort: float = 0.5
) -> ControlModel:
    """f = u, L = second moment + effort * |u|^2, G = second moment."""
    effort = validate_positive(effort, "effort")
    return ControlModel(
        name="tracking",
        dimension=dimension,
        horizon=horizon,
        controls=unit_controls(dimension),
        drift=lambda t, x, m, u: np.broadcast_to(u, x.shape).astype(float),
        running_cost=lambda t, m, u: _second_moment(m) + effort * float(u @ u),
        terminal_cost=_second_moment,
        c_f=0.0,
        c_1=float(np.sqrt(dimension)),
        running_cost_floor=0.0,
        terminal_cost_floor=0.0,
    )


MODEL_LIBRARY: dict[str, Callable[..., ControlModel]] = {
    "zero_drift": zero_drift,
    "translation": translation,
    "contraction": contraction,
    "aggregation": aggregation,
    "tracking": tracking,
}


def build_model(model_id: str, **params: Any) -> ControlModel:
    """Instantiate a library model by identifier.

    Raises:
        ValidationError: If the identifier is unknown or a parameter is invalid.
    """
    normalized = model_id.lower().strip()
    if normalized not in MODEL_LIBRARY:
        raise ValidationError(
            f"Invalid model id: '{model_id}'. "
            f"Valid options are: {', '.join(sorted(MODEL_LIBRARY))}"
        )
    try:
        return MODEL_LIBRARY[normalized](**params)
    except TypeError as e:
        raise ValidationError(f"Invalid parameters for model '{model_id}': {e}") from e
