"""Controlled nonlocal continuity equation on particle clouds.

A `ControlModel` bundles the drift f(t, x, m, u), the running cost L(t, m, u)
and the terminal cost G(m) over a finite control set U. Relaxed controls are
piecewise-constant probability mixtures over U; the flow integrates all
particles jointly with fixed-step RK4 so the nonlocal argument m_t is always
the current cloud.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from wassprox.config import DEFAULT_TOLERANCES, Tolerances
from wassprox.measure_core import (
    ParticleMeasure,
    VelocityField,
    second_moment_root,
    wasserstein2,
)
from wassprox.utils.validators import (
    NumericalError,
    ValidationError,
    validate_finite_array,
    validate_positive,
    validate_probability_vector,
    validate_time_window,
)

logger = logging.getLogger(__name__)

Drift = Callable[[float, np.ndarray, ParticleMeasure, np.ndarray], np.ndarray]
RunningCost = Callable[[float, ParticleMeasure, np.ndarray], float]
TerminalCost = Callable[[ParticleMeasure], float]
ValueFunction = Callable[[float, ParticleMeasure], float]

# Breakpoints closer than this are treated as the same time.
_TIME_EPS = 1e-12


def _zero_modulus(_: float) -> float:
    return 0.0


@dataclass(frozen=True, eq=False)
class ControlModel:
    """Dynamics, costs and declared regularity constants of a control problem.

    Attributes:
        name: Library identifier.
        dimension: State dimension d.
        horizon: Terminal time T.
        controls: (K, p) array, one row per control value in U.
        drift: f(t, points, m, u) -> (N, d) velocities at the given points.
        running_cost: L(t, m, u).
        terminal_cost: G(m).
        c_f: Declared Lipschitz constant of f in (x, m), or None if not declared.
        c_l: Declared Lipschitz constant of L in m, or None if not declared.
        c_1: Declared sublinear growth constant of f.
        omega_f: Declared modulus of continuity of f in time.
        running_cost_floor: Lower bound of L, used to prune value searches.
        terminal_cost_floor: Lower bound of G, used to prune value searches.
        exact_value: Closed-form value function when one is known.
    """

    name: str
    dimension: int
    horizon: float
    controls: np.ndarray
    drift: Drift
    running_cost: RunningCost
    terminal_cost: TerminalCost
    c_f: Optional[float] = None
    c_l: Optional[float] = None
    c_1: float = 0.0
    omega_f: Callable[[float], float] = field(default=_zero_modulus)
    running_cost_floor: Optional[float] = None
    terminal_cost_floor: Optional[float] = None
    exact_value: Optional[ValueFunction] = None

    def __post_init__(self) -> None:
        if int(self.dimension) < 1:
            raise ValidationError(f"Invalid dimension: '{self.dimension}'. Must be at least 1.")
        validate_positive(self.horizon, "horizon")
        controls = np.array(self.controls, dtype=float)
        if controls.ndim == 1:
            controls = controls.reshape(-1, 1)
        controls = validate_finite_array(controls, "control set", ndim=2)
        if controls.shape[0] == 0:
            raise ValidationError("Invalid control set: U must contain at least one control.")
        controls.setflags(write=False)
        object.__setattr__(self, "controls", controls)
        object.__setattr__(self, "dimension", int(self.dimension))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def control_count(self) -> int:
        return int(self.controls.shape[0])

    def control_label(self, index: int) -> str:
        row = self.controls[index]
        return " ".join(f"{value:g}" for value in row)

    def velocity(
        self, t: float, points: np.ndarray, measure: ParticleMeasure, mixture: np.ndarray
    ) -> np.ndarray:
        """Mixture-averaged drift at `points` (fixed summation order over U)."""
        result = np.zeros_like(points)
        for index in range(self.control_count):
            if mixture[index] > 0:
                result = result + mixture[index] * np.asarray(
                    self.drift(t, points, measure, self.controls[index]), dtype=float
                )
        return result

    def mixed_running_cost(self, t: float, measure: ParticleMeasure, mixture: np.ndarray) -> float:
        total = 0.0
        for index in range(self.control_count):
            if mixture[index] > 0:
                total += mixture[index] * float(
                    self.running_cost(t, measure, self.controls[index])
                )
        return total


@dataclass(frozen=True, eq=False)
class RelaxedControl:
    """Piecewise-constant mixtures over U on [breakpoints[0], breakpoints[-1]].

    Interval k is [breakpoints[k], breakpoints[k+1]) and carries `mixtures[k]`.
    A single breakpoint with no mixtures is a zero-length control.
    """

    breakpoints: np.ndarray
    mixtures: np.ndarray

    def __post_init__(self) -> None:
        breakpoints = validate_finite_array(
            np.asarray(self.breakpoints, dtype=float).reshape(-1), "breakpoints", ndim=1
        )
        mixtures = np.asarray(self.mixtures, dtype=float)
        if breakpoints.size == 0:
            raise ValidationError("Invalid relaxed control: at least one breakpoint is required.")
        if np.any(np.diff(breakpoints) <= 0):
            raise ValidationError("Invalid relaxed control: breakpoints must be strictly increasing.")
        if mixtures.ndim != 2 or mixtures.shape[0] != breakpoints.size - 1:
            raise ValidationError(
                f"Invalid relaxed control: {breakpoints.size - 1} intervals need as many "
                f"mixtures, got shape {mixtures.shape}."
            )
        for row in mixtures:
            validate_probability_vector(row, "mixture", DEFAULT_TOLERANCES.weight_sum)
        breakpoints.setflags(write=False)
        mixtures = mixtures.copy()
        mixtures.setflags(write=False)
        object.__setattr__(self, "breakpoints", breakpoints)
        object.__setattr__(self, "mixtures", mixtures)

    @classmethod
    def constant(
        cls, s: float, r: float, mixture: Sequence[float]
    ) -> "RelaxedControl":
        return cls(np.array([s, r], dtype=float), np.array([mixture], dtype=float))

    @classmethod
    def pure(
        cls, breakpoints: Sequence[float], indices: Sequence[int], control_count: int
    ) -> "RelaxedControl":
        """One control index per interval."""
        mixtures = np.zeros((len(indices), control_count))
        mixtures[np.arange(len(indices)), np.asarray(indices, dtype=int)] = 1.0
        return cls(np.asarray(breakpoints, dtype=float), mixtures)

    @classmethod
    def empty(cls, t: float, control_count: int) -> "RelaxedControl":
        return cls(np.array([t], dtype=float), np.zeros((0, control_count)))

    @property
    def start(self) -> float:
        return float(self.breakpoints[0])

    @property
    def end(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def control_count(self) -> int:
        return int(self.mixtures.shape[1])

    @property
    def is_empty(self) -> bool:
        return self.mixtures.shape[0] == 0

    def mixture_at(self, t: float) -> np.ndarray:
        """Mixture active at time t (right-continuous; the last interval is closed)."""
        if self.is_empty:
            raise ValidationError("A zero-length control has no mixture.")
        index = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return self.mixtures[min(max(index, 0), self.mixtures.shape[0] - 1)]

    def pure_indices(self) -> Optional[list[int]]:
        """Control index per interval if every mixture is a unit vector."""
        indices = []
        for row in self.mixtures:
            index = int(np.argmax(row))
            if row[index] != 1.0:
                return None
            indices.append(index)
        return indices


def concat(xi1: RelaxedControl, theta: float, xi2: RelaxedControl) -> RelaxedControl:
    """Concatenation: xi1 before theta, xi2 from theta on.

    Raises:
        ValidationError: If xi1 does not end at theta or xi2 does not start there.
    """
    if abs(xi1.end - theta) > _TIME_EPS or abs(xi2.start - theta) > _TIME_EPS:
        raise ValidationError(
            f"Cannot concatenate at {theta}: first control ends at {xi1.end}, "
            f"second starts at {xi2.start}."
        )
    if xi1.control_count != xi2.control_count:
        raise ValidationError("Cannot concatenate controls over different control sets.")
    if xi2.is_empty:
        return xi1
    if xi1.is_empty:
        return xi2
    return RelaxedControl(
        np.concatenate([xi1.breakpoints, xi2.breakpoints[1:]]),
        np.vstack([xi1.mixtures, xi2.mixtures]),
    )


@dataclass(frozen=True, eq=False)
class MeasureTrajectory:
    """Particle paths on a time grid; every m_t is the push-forward of m_s along them.

    Attributes:
        times: (M+1,) grid including all control breakpoints.
        paths: (M+1, N, d) particle positions X^{s,t_k}(y_i).
        weights: (N,) particle weights, constant in time.
    """

    times: np.ndarray
    paths: np.ndarray
    weights: np.ndarray

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    def measure(self, k: int) -> ParticleMeasure:
        return _measure_unchecked(self.paths[k], self.weights)

    @property
    def measures(self) -> list[ParticleMeasure]:
        return [self.measure(k) for k in range(self.times.size)]

    @property
    def initial(self) -> ParticleMeasure:
        return self.measure(0)

    @property
    def final(self) -> ParticleMeasure:
        return self.measure(self.times.size - 1)


def _measure_unchecked(points: np.ndarray, weights: np.ndarray) -> ParticleMeasure:
    """Measure from arrays already known to be valid (skips re-validation)."""
    measure = object.__new__(ParticleMeasure)
    object.__setattr__(measure, "points", points)
    object.__setattr__(measure, "weights", weights)
    return measure


def _segments(xi: RelaxedControl, s: float, r: float) -> list[tuple[float, float, np.ndarray]]:
    """Split [s, r] at the control breakpoints, pairing each piece with its mixture."""
    if xi.is_empty or xi.start > s + _TIME_EPS or xi.end < r - _TIME_EPS:
        raise ValidationError(
            f"Relaxed control on [{xi.start}, {xi.end}] does not cover [{s}, {r}]."
        )
    cuts = [s] + [float(b) for b in xi.breakpoints if s + _TIME_EPS < b < r - _TIME_EPS] + [r]
    return [(a, b, xi.mixture_at(0.5 * (a + b))) for a, b in zip(cuts[:-1], cuts[1:])]


def _rk4_step(
    model: ControlModel,
    t: float,
    h: float,
    state: np.ndarray,
    weights: np.ndarray,
    mixture: np.ndarray,
) -> np.ndarray:
    def rhs(time: float, points: np.ndarray) -> np.ndarray:
        return model.velocity(time, points, _measure_unchecked(points, weights), mixture)

    k1 = rhs(t, state)
    k2 = rhs(t + 0.5 * h, state + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, state + 0.5 * h * k2)
    k4 = rhs(t + h, state + h * k3)
    return state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def solve_continuity(
    model: ControlModel,
    s: float,
    r: float,
    mu: ParticleMeasure,
    xi: RelaxedControl,
    step: float,
) -> MeasureTrajectory:
    """Integrate the characteristic system of all particles on [s, r].

    Each control interval is split into equal RK4 substeps no longer than `step`,
    so breakpoints are always grid points.

    Raises:
        ValidationError: If the window, step or control is inconsistent.
        NumericalError: If a particle position becomes non-finite.
    """
    s, r = validate_time_window(s, r)
    step = validate_positive(step, "step")
    if mu.dimension != model.dimension:
        raise ValidationError(
            f"Measure dimension {mu.dimension} does not match model dimension {model.dimension}."
        )

    times = [s]
    paths = [np.array(mu.points, dtype=float)]
    if r > s:
        for a, b, mixture in _segments(xi, s, r):
            substeps = max(1, math.ceil((b - a) / step - 1e-9))
            h = (b - a) / substeps
            state = paths[-1]
            for j in range(substeps):
                t = a + j * h
                state = _rk4_step(model, t, h, state, mu.weights, mixture)
                if not np.all(np.isfinite(state)):
                    raise NumericalError(
                        f"Non-finite particle state at t={t + h!r} in model '{model.name}'."
                    )
                times.append(b if j == substeps - 1 else a + (j + 1) * h)
                paths.append(state)

    stacked = np.stack(paths)
    stacked.setflags(write=False)
    grid = np.asarray(times)
    grid.setflags(write=False)
    return MeasureTrajectory(grid, stacked, mu.weights)


def _segment_mixtures(traj: MeasureTrajectory, xi: RelaxedControl) -> list[np.ndarray]:
    return [
        xi.mixture_at(0.5 * (traj.times[k] + traj.times[k + 1]))
        for k in range(traj.times.size - 1)
    ]


@dataclass(frozen=True)
class TestFunction:
    """Smooth test function phi(t, x) with its time derivative and spatial gradient.

    All callables take (t, points) with points of shape (N, d); `value` and
    `time_derivative` return (N,), `gradient` returns (N, d).
    """

    __test__ = False

    name: str
    value: Callable[[float, np.ndarray], np.ndarray]
    time_derivative: Callable[[float, np.ndarray], np.ndarray]
    gradient: Callable[[float, np.ndarray], np.ndarray]


def polynomial_test_functions(dimension: int) -> list[TestFunction]:
    """Monomials of degree at most two in (t, x)."""

    def zeros(t: float, x: np.ndarray) -> np.ndarray:
        return np.zeros(x.shape[0])

    def zero_gradient(t: float, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(x)

    def unit(k: int, x: np.ndarray) -> np.ndarray:
        e = np.zeros_like(x)
        e[:, k] = 1.0
        return e

    library = [
        TestFunction("1", lambda t, x: np.ones(x.shape[0]), zeros, zero_gradient),
        TestFunction(
            "t^2",
            lambda t, x: np.full(x.shape[0], t * t),
            lambda t, x: np.full(x.shape[0], 2.0 * t),
            zero_gradient,
        ),
    ]
    for i in range(dimension):
        library.append(
            TestFunction(f"x{i}", lambda t, x, i=i: x[:, i], zeros, lambda t, x, i=i: unit(i, x))
        )
        library.append(
            TestFunction(
                f"t*x{i}",
                lambda t, x, i=i: t * x[:, i],
                lambda t, x, i=i: x[:, i],
                lambda t, x, i=i: t * unit(i, x),
            )
        )
        for j in range(i, dimension):
            library.append(
                TestFunction(
                    f"x{i}*x{j}",
                    lambda t, x, i=i, j=j: x[:, i] * x[:, j],
                    zeros,
                    lambda t, x, i=i, j=j: x[:, [j]] * unit(i, x) + x[:, [i]] * unit(j, x),
                )
            )
    return library


def weak_form_residual(
    model: ControlModel,
    traj: MeasureTrajectory,
    xi: RelaxedControl,
    phi: TestFunction,
) -> float:
    """|<phi(r), m_r> - <phi(s), m_s> - integral of <d_t phi + grad phi . v, m_t> dt|.

    The time integral is the trapezoid rule on the trajectory grid, with the
    mixture of each grid segment held on both of its ends.
    """
    weights = traj.weights
    boundary = float(
        weights @ phi.value(traj.end, traj.paths[-1]) - weights @ phi.value(traj.start, traj.paths[0])
    )

    integral = 0.0
    for k, mixture in enumerate(_segment_mixtures(traj, xi)):
        ends = []
        for index in (k, k + 1):
            t, points = float(traj.times[index]), traj.paths[index]
            velocity = model.velocity(t, points, traj.measure(index), mixture)
            density = phi.time_derivative(t, points) + np.einsum(
                "ij,ij->i", phi.gradient(t, points), velocity
            )
            ends.append(float(weights @ density))
        integral += 0.5 * (traj.times[k + 1] - traj.times[k]) * (ends[0] + ends[1])

    return abs(boundary - integral)


def running_cost_integral(model: ControlModel, traj: MeasureTrajectory, xi: RelaxedControl) -> float:
    """Trapezoid quadrature of the mixed running cost along the trajectory."""
    total = 0.0
    for k, mixture in enumerate(_segment_mixtures(traj, xi)):
        left = model.mixed_running_cost(float(traj.times[k]), traj.measure(k), mixture)
        right = model.mixed_running_cost(float(traj.times[k + 1]), traj.measure(k + 1), mixture)
        total += 0.5 * (traj.times[k + 1] - traj.times[k]) * (left + right)
    return total


def payoff_J(
    model: ControlModel,
    s: float,
    mu: ParticleMeasure,
    xi: RelaxedControl,
    step: float,
) -> float:
    """Running cost on [s, T] plus the terminal cost of m_T."""
    traj = solve_continuity(model, s, model.horizon, mu, xi, step)
    return running_cost_integral(model, traj, xi) + float(model.terminal_cost(traj.final))


@dataclass(frozen=True)
class GrowthReport:
    """Smallest constants for which the a priori growth estimates hold on a trajectory."""

    c1: float
    c2: float
    c3: float
    c4: float
    violations: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict[str, float]:
        return {"c1": self.c1, "c2": self.c2, "c3": self.c3, "c4": self.c4}


def growth_diagnostics(
    traj: MeasureTrajectory,
    mu: ParticleMeasure,
    bounds: Optional[dict[str, float]] = None,
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> GrowthReport:
    """Fit c1..c4 of the moment, distance and characteristic growth estimates.

    Args:
        traj: Trajectory started from mu.
        mu: Initial measure.
        bounds: Optional declared constants keyed "c1".."c4"; exceeding one is a violation.
        tolerances: Metric tolerance applied to the declared bounds.
    """
    varsigma = second_moment_root(mu)
    origin = mu.points
    base = 1.0 + np.linalg.norm(origin, axis=1) + varsigma

    c1 = c2 = c3 = c4 = 0.0
    for k, t in enumerate(traj.times):
        points = traj.paths[k]
        c1 = max(c1, second_moment_root(traj.measure(k)) / (1.0 + varsigma))
        c3 = max(c3, float(np.max(np.linalg.norm(points, axis=1) / base)))
        elapsed = float(t - traj.start)
        if elapsed <= 0:
            continue
        distance, _ = wasserstein2(traj.measure(k), mu, tolerances)
        c2 = max(c2, distance / ((1.0 + varsigma) * elapsed))
        c4 = max(c4, float(np.max(np.linalg.norm(points - origin, axis=1) / (base * elapsed))))

    fitted = {"c1": c1, "c2": c2, "c3": c3, "c4": c4}
    violations = tuple(
        f"{name}: fitted {fitted[name]:.6g} exceeds declared {limit:.6g}"
        for name, limit in sorted((bounds or {}).items())
        if fitted[name] > limit + tolerances.metric
    )
    return GrowthReport(c1, c2, c3, c4, violations)


def averaged_velocity(
    model: ControlModel,
    s: float,
    h: float,
    mu: ParticleMeasure,
    xi: RelaxedControl,
    step: Optional[float] = None,
) -> VelocityField:
    """v^h(y) = (1/h) * integral over [s, s+h] of the mixed drift along X^{s,t}(y)."""
    h = validate_positive(h, "h")
    traj = solve_continuity(model, s, s + h, mu, xi, step or h / 20.0)

    total = np.zeros_like(traj.paths[0])
    for k, mixture in enumerate(_segment_mixtures(traj, xi)):
        ends = [
            model.velocity(float(traj.times[i]), traj.paths[i], traj.measure(i), mixture)
            for i in (k, k + 1)
        ]
        total += 0.5 * (traj.times[k + 1] - traj.times[k]) * (ends[0] + ends[1])
    return VelocityField(mu, total / h)


def averaged_running_cost(
    model: ControlModel,
    s: float,
    h: float,
    mu: ParticleMeasure,
    xi: RelaxedControl,
    step: Optional[float] = None,
) -> float:
    """(1/h) * integral over [s, s+h] of the mixed running cost."""
    h = validate_positive(h, "h")
    traj = solve_continuity(model, s, s + h, mu, xi, step or h / 20.0)
    return running_cost_integral(model, traj, xi) / h


@dataclass(frozen=True)
class ModelCertificate:
    """Sampled worst ratios of observed to declared constants."""

    growth_ratio: float
    lipschitz_f_ratio: Optional[float]
    lipschitz_l_ratio: Optional[float]
    violations: tuple[str, ...]

    @property
    def passed(self) -> bool:
        return not self.violations


def _random_measure(rng: np.random.Generator, dimension: int, size: int) -> ParticleMeasure:
    return ParticleMeasure.from_points(rng.normal(scale=1.5, size=(size, dimension)))


def certify_model(
    model: ControlModel,
    rng: np.random.Generator,
    samples: int = 200,
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> ModelCertificate:
    """Check the declared growth and Lipschitz constants on random inputs.

    A ratio above 1 + lipschitz_slack is reported as a violation.
    """
    limit = 1.0 + tolerances.lipschitz_slack
    growth = 0.0
    lip_f: Optional[float] = 0.0 if model.c_f is not None else None
    lip_l: Optional[float] = 0.0 if model.c_l is not None else None

    for _ in range(samples):
        t = float(rng.uniform(0.0, model.horizon))
        u = model.controls[int(rng.integers(model.control_count))]
        m, m_prime = (_random_measure(rng, model.dimension, 4) for _ in range(2))
        x, x_prime = rng.normal(scale=2.0, size=(2, 1, model.dimension))

        value = np.asarray(model.drift(t, x, m, u))[0]
        scale = model.c_1 * (1.0 + float(np.linalg.norm(x)) + second_moment_root(m))
        speed = float(np.linalg.norm(value))
        if scale > 0:
            growth = max(growth, speed / scale)
        elif speed > 0:
            growth = math.inf

        distance, _ = wasserstein2(m, m_prime, tolerances)
        if lip_f is not None and model.c_f:
            other = np.asarray(model.drift(t, x_prime, m_prime, u))[0]
            gap = float(np.linalg.norm(x - x_prime)) + distance
            if gap > 0:
                lip_f = max(lip_f, float(np.linalg.norm(value - other)) / (model.c_f * gap))
        if lip_l is not None and model.c_l and distance > 0:
            cost_gap = abs(float(model.running_cost(t, m, u)) - float(model.running_cost(t, m_prime, u)))
            lip_l = max(lip_l, cost_gap / (model.c_l * distance))

    violations = []
    if growth > limit:
        violations.append(f"growth ratio {growth:.4g} exceeds {limit:.4g}")
    if lip_f is not None and lip_f > limit:
        violations.append(f"Lipschitz ratio of f {lip_f:.4g} exceeds {limit:.4g}")
    if lip_l is not None and lip_l > limit:
        violations.append(f"Lipschitz ratio of L {lip_l:.4g} exceeds {limit:.4g}")
    if violations:
        logger.warning("Model '%s' failed certification: %s", model.name, "; ".join(violations))
    return ModelCertificate(growth, lip_f, lip_l, tuple(violations))


def trajectory_rows(traj: MeasureTrajectory) -> list[list[Any]]:
    """Long-format rows (time, particle_id, x_1..x_d, weight) for CSV export."""
    rows: list[list[Any]] = []
    for k, t in enumerate(traj.times):
        for i, point in enumerate(traj.paths[k]):
            rows.append([float(t), i, *[float(c) for c in point], float(traj.weights[i])])
    return rows
