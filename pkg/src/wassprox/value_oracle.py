"""Exact value search over piecewise-constant pure controls.

The value of a query is the minimum of the payoff over every sequence of
controls that is constant on the intervals of a uniform grid of [s, T]. The
search is a memoized depth-first enumeration; a branch is pruned as soon as its
accumulated cost plus a lower bound of the remaining cost cannot beat the best
sequence found so far.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from wassprox.config import DEFAULT_BUDGET, DEFAULT_STEP, DEFAULT_TOLERANCES, Tolerances
from wassprox.dynamics_engine import (
    ControlModel,
    RelaxedControl,
    running_cost_integral,
    solve_continuity,
)
from wassprox.measure_core import ParticleMeasure, wasserstein2
from wassprox.utils.validators import (
    BudgetExceededError,
    ValidationError,
    validate_positive,
)

logger = logging.getLogger(__name__)

# Times closer than this are the same grid point.
_GRID_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class ValueQuery:
    """Initial point, number of grid intervals and optional per-interval candidates.

    `control_mesh[k]` lists the control indices allowed on interval k; by
    default every control is allowed everywhere.
    """

    s: float
    measure: ParticleMeasure
    n_steps: int
    control_mesh: Optional[tuple[tuple[int, ...], ...]] = None

    def __post_init__(self) -> None:
        if int(self.n_steps) < 1:
            raise ValidationError(f"Invalid n_steps: '{self.n_steps}'. Must be at least 1.")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        if self.control_mesh is not None:
            mesh = tuple(tuple(int(i) for i in candidates) for candidates in self.control_mesh)
            if len(mesh) != self.n_steps:
                raise ValidationError(
                    f"Invalid control mesh: {self.n_steps} steps need as many candidate "
                    f"sets, got {len(mesh)}."
                )
            if any(not candidates for candidates in mesh):
                raise ValidationError("Invalid control mesh: candidate sets must be non-empty.")
            object.__setattr__(self, "control_mesh", mesh)


@dataclass
class SearchStats:
    sequences: int = 0
    nodes: int = 0
    pruned: int = 0
    cache_hits: int = 0

    def as_dict(self) -> dict[str, int]:
        return {
            "sequences": self.sequences,
            "nodes": self.nodes,
            "pruned": self.pruned,
            "cache_hits": self.cache_hits,
        }


@dataclass(frozen=True, eq=False)
class ValueResult:
    value: float
    control: RelaxedControl
    indices: tuple[int, ...]
    stats: SearchStats = field(default_factory=SearchStats)


class ValueOracle:
    """Memoized value search for one model, integrator step and budget.

    The cache is keyed by the interval grid, the interval index, the particle
    positions quantized at `tolerances.cache_quantum` and the candidate sets still
    ahead, so repeated sub-problems of dynamic programming checks are solved once.
    """

    def __init__(
        self,
        model: ControlModel,
        step: float = DEFAULT_STEP,
        budget: int = DEFAULT_BUDGET,
        tolerances: Tolerances = DEFAULT_TOLERANCES,
    ) -> None:
        self.model = model
        self.step = validate_positive(step, "step")
        self.budget = int(budget)
        self.tolerances = tolerances
        self._cache: dict[
            tuple[bytes, int, bytes, tuple[tuple[int, ...], ...]], tuple[float, tuple[int, ...]]
        ] = {}

    def clear(self) -> None:
        self._cache.clear()

    def grid(self, s: float, n_steps: int) -> np.ndarray:
        if s > self.model.horizon + _GRID_EPS:
            raise ValidationError(
                f"Invalid query time: s = {s} is after the horizon T = {self.model.horizon}."
            )
        return np.linspace(s, self.model.horizon, n_steps + 1)

    def candidates(self, query: ValueQuery) -> tuple[tuple[int, ...], ...]:
        count = self.model.control_count
        if query.control_mesh is None:
            return (tuple(range(count)),) * query.n_steps
        for candidates in query.control_mesh:
            if min(candidates) < 0 or max(candidates) >= count:
                raise ValidationError(
                    f"Invalid control mesh: indices must lie in [0, {count - 1}]."
                )
        return query.control_mesh

    def check_budget(self, candidates: Sequence[Sequence[int]]) -> int:
        """Number of sequences in the search class.

        Raises:
            BudgetExceededError: If it exceeds the configured budget.
        """
        required = math.prod(len(c) for c in candidates)
        if required > self.budget:
            raise BudgetExceededError(required, self.budget)
        return required

    def tail_floor(self, t: float) -> float:
        """Lower bound of the cost still to be paid from time t."""
        if self.model.running_cost_floor is None or self.model.terminal_cost_floor is None:
            return -math.inf
        return (
            self.model.running_cost_floor * (self.model.horizon - t)
            + self.model.terminal_cost_floor
        )

    def _key(
        self,
        grid: np.ndarray,
        k: int,
        measure: ParticleMeasure,
        candidates: Sequence[Sequence[int]],
    ) -> tuple[bytes, int, bytes, tuple[tuple[int, ...], ...]]:
        # The remaining candidate sets decide the class the cached minimum ranges over.
        cells = np.round(measure.points / self.tolerances.cache_quantum).astype(np.int64)
        rest = tuple(tuple(c) for c in candidates[k:])
        return grid.tobytes(), k, cells.tobytes() + measure.weights.tobytes(), rest

    def search(
        self,
        grid: np.ndarray,
        measure: ParticleMeasure,
        candidates: Sequence[Sequence[int]],
        terminal: Callable[[ParticleMeasure], float],
        stats: SearchStats,
        k: int = 0,
    ) -> tuple[float, tuple[int, ...]]:
        """Best cost-to-go from grid[k] over the remaining intervals."""
        if k == grid.size - 1:
            return float(terminal(measure)), ()

        key = self._key(grid, k, measure, candidates)
        cached = self._cache.get(key)
        if cached is not None:
            stats.cache_hits += 1
            return cached

        stats.nodes += 1
        a, b = float(grid[k]), float(grid[k + 1])
        floor = self.tail_floor(b)
        best, best_indices = math.inf, ()
        for index in candidates[k]:
            xi = RelaxedControl.pure([a, b], [index], self.model.control_count)
            traj = solve_continuity(self.model, a, b, measure, xi, self.step)
            cost = running_cost_integral(self.model, traj, xi)
            if cost + floor >= best:
                stats.pruned += 1
                continue
            rest, indices = self.search(grid, traj.final, candidates, terminal, stats, k + 1)
            if cost + rest < best:
                best, best_indices = cost + rest, (index, *indices)

        self._cache[key] = (best, best_indices)
        return best, best_indices

    def value(self, query: ValueQuery) -> ValueResult:
        """Minimum payoff over the search class and a control attaining it.

        Raises:
            BudgetExceededError: If the class is larger than the budget.
            ValidationError: If the query is inconsistent with the model.
        """
        model = self.model
        if query.measure.dimension != model.dimension:
            raise ValidationError(
                f"Measure dimension {query.measure.dimension} does not match model "
                f"dimension {model.dimension}."
            )
        if abs(query.s - model.horizon) <= _GRID_EPS:
            return ValueResult(
                float(model.terminal_cost(query.measure)),
                RelaxedControl.empty(model.horizon, model.control_count),
                (),
            )

        grid = self.grid(query.s, query.n_steps)
        candidates = self.candidates(query)
        stats = SearchStats(sequences=self.check_budget(candidates))
        value, indices = self.search(
            grid, query.measure, candidates, model.terminal_cost, stats
        )
        control = RelaxedControl.pure(grid, indices, model.control_count)
        logger.debug(
            "Value at s=%g over %d steps: %.12g (%s)", query.s, query.n_steps, value, stats
        )
        return ValueResult(value, control, indices, stats)


def value_dp(
    model: ControlModel,
    query: ValueQuery,
    step: float = DEFAULT_STEP,
    budget: int = DEFAULT_BUDGET,
    oracle: Optional[ValueOracle] = None,
) -> ValueResult:
    """Val(s, mu) over pure piecewise-constant controls on `query.n_steps` intervals."""
    oracle = oracle or ValueOracle(model, step, budget)
    return oracle.value(query)


@dataclass(frozen=True)
class DppResidual:
    residual: float
    direct: float
    staged: float


def dpp_residual(
    model: ControlModel,
    s: float,
    mu: ParticleMeasure,
    theta: float,
    n_steps: int,
    step: float = DEFAULT_STEP,
    budget: int = DEFAULT_BUDGET,
    oracle: Optional[ValueOracle] = None,
) -> DppResidual:
    """|Val(s, mu) - min over first-stage controls of [cost on [s, theta] + Val(theta, m_theta)]|.

    Theta must be a point of the uniform n_steps grid of [s, T]; both sides
    search the same class of controls.

    Raises:
        ValidationError: If theta is outside [s, T] or off the grid.
        BudgetExceededError: If either search exceeds the budget.
    """
    oracle = oracle or ValueOracle(model, step, budget)
    grid = oracle.grid(s, n_steps)
    matches = np.nonzero(np.abs(grid - theta) <= 1e-9)[0]
    if matches.size == 0:
        raise ValidationError(
            f"Invalid split time: theta = {theta} is not a point of the {n_steps}-step grid."
        )
    split = int(matches[0])

    direct = oracle.value(ValueQuery(s, mu, n_steps)).value
    if split == 0:
        return DppResidual(0.0, direct, direct)

    remaining = n_steps - split
    oracle.check_budget([range(model.control_count)] * n_steps)
    theta_exact = float(grid[split])

    def continuation(measure: ParticleMeasure) -> float:
        if remaining == 0:
            return float(model.terminal_cost(measure))
        return oracle.value(ValueQuery(theta_exact, measure, remaining)).value

    candidates = (tuple(range(model.control_count)),) * split
    stats = SearchStats(sequences=model.control_count**n_steps)
    staged, _ = oracle.search(grid[: split + 1], mu, candidates, continuation, stats)

    residual = abs(direct - staged)
    logger.info("DPP at theta=%g: direct %.12g, staged %.12g", theta, direct, staged)
    return DppResidual(residual, direct, staged)


def boundary_check(
    model: ControlModel, measures: Sequence[ParticleMeasure], oracle: Optional[ValueOracle] = None
) -> float:
    """max over the measures of |Val(T, mu) - G(mu)|."""
    oracle = oracle or ValueOracle(model)
    return max(
        (
            abs(
                oracle.value(ValueQuery(model.horizon, mu, 1)).value
                - float(model.terminal_cost(mu))
            )
            for mu in measures
        ),
        default=0.0,
    )


@dataclass(frozen=True)
class LipschitzEstimate:
    constant: float
    ratios: tuple[float, ...]


def value_lipschitz_estimate(
    model: ControlModel,
    s: float,
    pairs: Sequence[tuple[ParticleMeasure, ParticleMeasure]],
    n_steps: int,
    step: float = DEFAULT_STEP,
    budget: int = DEFAULT_BUDGET,
    oracle: Optional[ValueOracle] = None,
) -> LipschitzEstimate:
    """Fit K in |Val(s, mu) - Val(s, mu')| <= K W2(mu, mu') over sampled pairs.

    Pairs at distance zero are ignored.
    """
    oracle = oracle or ValueOracle(model, step, budget)
    ratios = []
    for mu, nu in pairs:
        distance, _ = wasserstein2(mu, nu, oracle.tolerances)
        if distance <= oracle.tolerances.metric:
            continue
        gap = abs(
            oracle.value(ValueQuery(s, mu, n_steps)).value
            - oracle.value(ValueQuery(s, nu, n_steps)).value
        )
        ratios.append(gap / distance)
    return LipschitzEstimate(max(ratios, default=0.0), tuple(ratios))
