"""Feedback synthesis by proximal aiming and empirical verification of the value bounds.

A `FeedbackStrategy` looks up the Moreau-Yosida anchor of the current state in a
value dictionary and picks the control minimizing the pulled-back Hamiltonian
integrand. `run_process` applies it in sample-and-hold fashion on a partition;
the bound checks compare the resulting payoffs with the dictionary and with the
exact value search.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from wassprox.bellman_check import c_of_D, hamiltonian
from wassprox.config import (
    DEFAULT_EPSILON_GRID,
    DEFAULT_KAPPA_GRID,
    DEFAULT_PARTITION_STEPS,
    DEFAULT_STEP,
    DEFAULT_TOLERANCES,
)
from wassprox.dynamics_engine import (
    ControlModel,
    MeasureTrajectory,
    RelaxedControl,
    payoff_J,
    running_cost_integral,
    solve_continuity,
)
from wassprox.measure_core import ParticleMeasure
from wassprox.nonsmooth_kit import (
    EnvelopeResult,
    ProximalPair,
    ValueDictionary,
    displacement_cone_check,
    proximal_pair,
)
from wassprox.utils.validators import (
    HypothesisError,
    NumericalError,
    ValidationError,
    validate_nonnegative,
    validate_positive,
    validate_sign,
)
from wassprox.value_oracle import ValueOracle, ValueQuery

logger = logging.getLogger(__name__)

StartPoint = tuple[float, ParticleMeasure]

# Start and end of a partition must match the requested window up to this.
_TIME_EPS = 1e-12


@dataclass(frozen=True)
class Partition:
    """Strictly increasing times s_0 < s_1 < ... < s_n."""

    times: np.ndarray

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float).reshape(-1)
        if times.size < 2:
            raise ValidationError("Invalid partition: at least two times are required.")
        if not np.all(np.isfinite(times)) or np.any(np.diff(times) <= 0):
            raise ValidationError("Invalid partition: times must be finite and strictly increasing.")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, start: float, end: float, n: int) -> "Partition":
        if int(n) < 1:
            raise ValidationError(f"Invalid partition size: '{n}'. Must be at least 1.")
        return cls(np.linspace(start, end, int(n) + 1))

    @property
    def n(self) -> int:
        return int(self.times.size - 1)

    @property
    def min_step(self) -> float:
        return float(np.min(np.diff(self.times)))

    @property
    def max_step(self) -> float:
        return float(np.max(np.diff(self.times)))

    def fits(self, alpha_lo: float, alpha_hi: float) -> bool:
        return alpha_lo <= self.min_step + _TIME_EPS and self.max_step <= alpha_hi + _TIME_EPS


@dataclass(frozen=True)
class ParameterComplex:
    """Regularization, precision and step bounds under which the feedback is run."""

    kappa: float
    epsilon: float
    alpha_lo: float
    alpha_hi: float
    eta: float

    def __post_init__(self) -> None:
        validate_positive(self.kappa, "kappa")
        validate_nonnegative(self.epsilon, "epsilon")
        validate_nonnegative(self.eta, "eta")
        validate_positive(self.alpha_lo, "alpha_lo")
        if self.alpha_lo > self.alpha_hi:
            raise ValidationError(
                f"Invalid parameter complex: alpha_lo {self.alpha_lo} exceeds "
                f"alpha_hi {self.alpha_hi}."
            )
        if self.epsilon > self.alpha_lo**2 * (1.0 + 1e-12):
            raise ValidationError(
                f"Invalid parameter complex: epsilon {self.epsilon} exceeds "
                f"alpha_lo^2 = {self.alpha_lo**2}."
            )

    def check_gate(self, dictionary: ValueDictionary) -> float:
        """rho1(kappa) of the dictionary.

        Raises:
            ValidationError: If rho1(kappa) >= 1.
        """
        rho1 = dictionary.rho1(self.kappa)
        if rho1 >= 1.0:
            raise ValidationError(
                f"Invalid parameter complex: rho1({self.kappa}) = {rho1:.4g} is not below 1."
            )
        return rho1

    def as_dict(self) -> dict[str, float]:
        return {
            "kappa": self.kappa,
            "epsilon": self.epsilon,
            "alpha_lo": self.alpha_lo,
            "alpha_hi": self.alpha_hi,
            "eta": self.eta,
        }


@dataclass(frozen=True, eq=False)
class AimingChoice:
    index: int
    control: np.ndarray
    objective: tuple[float, ...]
    envelope: EnvelopeResult
    pair: ProximalPair


def aiming_objective(model: ControlModel, pair: ProximalPair) -> tuple[float, ...]:
    """Per-control value of int p(x).f(t, x, nu, u) mu(dx) + L(t, nu, u).

    (t, nu) is the anchor and p the plan barycenter of gamma pulled back to
    the support of the query measure mu.
    """
    mu = pair.query_measure
    p = pair.source_covector()
    t, nu = pair.anchor_t, pair.anchor_measure
    return tuple(
        p.pairing(np.asarray(model.drift(t, mu.points, nu, u), dtype=float))
        + float(model.running_cost(t, nu, u))
        for u in model.controls
    )


class FeedbackStrategy:
    """Deterministic proximal-aiming feedback built on a value dictionary.

    Args:
        model: Control problem.
        dictionary: Tabulated value function.
        kappa: Regularization parameter.
        epsilon: Subgradient slack recorded on every pair.
        sign: "sub" aims with inf-envelope pairs, "super" with sup-envelope pairs.
    """

    def __init__(
        self,
        model: ControlModel,
        dictionary: ValueDictionary,
        kappa: float,
        epsilon: float = 0.0,
        sign: str = "sub",
    ) -> None:
        if dictionary.dimension != model.dimension:
            raise ValidationError(
                f"Dictionary dimension {dictionary.dimension} does not match model "
                f"dimension {model.dimension}."
            )
        self.model = model
        self.dictionary = dictionary
        self.kappa = validate_positive(kappa, "kappa")
        self.epsilon = validate_nonnegative(epsilon, "epsilon")
        self.sign = validate_sign(sign)

    def __repr__(self) -> str:
        return (
            f"FeedbackStrategy(model={self.model.name!r}, kappa={self.kappa}, "
            f"epsilon={self.epsilon}, sign={self.sign!r})"
        )

    def choose(self, s: float, mu: ParticleMeasure) -> AimingChoice:
        envelope, pair = proximal_pair(
            self.dictionary,
            s,
            mu,
            self.kappa,
            sign=self.sign,
            epsilon=self.epsilon,
            horizon=self.model.horizon,
        )
        objective = aiming_objective(self.model, pair)
        index = int(np.argmin(objective))
        return AimingChoice(index, self.model.controls[index], objective, envelope, pair)


def aim_control(strategy: FeedbackStrategy, s: float, mu: ParticleMeasure) -> np.ndarray:
    """Control u selected at (s, mu); ties go to the lowest index.

    `strategy.choose` returns the index and the audit data alongside it.
    """
    return strategy.choose(s, mu).control


@dataclass(frozen=True, eq=False)
class AuditRecord:
    step: int
    s: float
    anchor_t: float
    anchor_distance: float
    a: float
    chosen: int
    chosen_label: str
    hamiltonian_margin: float
    gated: bool
    objective: tuple[float, ...]
    pair: ProximalPair

    def as_row(self) -> list[Any]:
        return [
            self.step,
            self.s,
            self.anchor_t,
            self.anchor_distance,
            self.a,
            self.chosen_label,
            self.hamiltonian_margin,
            "gated" if self.gated else "ungated",
        ]


AUDIT_COLUMNS = [
    "step",
    "s_i",
    "anchor_t",
    "anchor_dist",
    "a_i",
    "chosen_u",
    "hamiltonian_margin",
    "gate",
]


def _audit(model: ControlModel, step: int, s: float, choice: AimingChoice) -> AuditRecord:
    pair = choice.pair
    p = pair.barycenter()
    value = hamiltonian(model, pair.anchor_t, p.measure, p).value
    return AuditRecord(
        step=step,
        s=s,
        anchor_t=pair.anchor_t,
        anchor_distance=choice.envelope.diagnostics.anchor_distance,
        a=pair.a,
        chosen=choice.index,
        chosen_label=model.control_label(choice.index),
        hamiltonian_margin=pair.a + value,
        gated=pair.gated,
        objective=choice.objective,
        pair=pair,
    )


@dataclass(frozen=True, eq=False)
class ProcessResult:
    trajectory: MeasureTrajectory
    control: RelaxedControl
    audit: tuple[AuditRecord, ...]

    def audit_rows(self) -> list[list[Any]]:
        return [record.as_row() for record in self.audit]


def _check_partition(partition: Partition, s_star: float, horizon: float) -> None:
    if abs(partition.times[0] - s_star) > _TIME_EPS or abs(partition.times[-1] - horizon) > _TIME_EPS:
        raise ValidationError(
            f"Invalid partition: it spans [{partition.times[0]}, {partition.times[-1]}] "
            f"but the process runs on [{s_star}, {horizon}]."
        )


def run_process(
    strategy: FeedbackStrategy,
    s_star: float,
    mu_star: ParticleMeasure,
    partition: Partition,
    step: float = DEFAULT_STEP,
) -> ProcessResult:
    """Sample-and-hold control process: aim at each s_i, freeze the control until s_{i+1}.

    The returned trajectory is the solution under the recorded control from
    (s_star, mu_star) over the whole partition.
    """
    model = strategy.model
    _check_partition(partition, s_star, model.horizon)

    measure = mu_star
    indices: list[int] = []
    audit: list[AuditRecord] = []
    for i in range(partition.n):
        a, b = float(partition.times[i]), float(partition.times[i + 1])
        choice = strategy.choose(a, measure)
        indices.append(choice.index)
        audit.append(_audit(model, i, a, choice))
        xi = RelaxedControl.pure([a, b], [choice.index], model.control_count)
        measure = solve_continuity(model, a, b, measure, xi, step).final
        logger.debug("Step %d at s=%.6g: u = %s", i, a, choice.control)

    control = RelaxedControl.pure(partition.times, indices, model.control_count)
    trajectory = solve_continuity(model, s_star, model.horizon, mu_star, control, step)
    return ProcessResult(trajectory, control, tuple(audit))


def payoff_feedback(
    strategy: FeedbackStrategy,
    s_star: float,
    mu_star: ParticleMeasure,
    partition: Partition,
    step: float = DEFAULT_STEP,
) -> float:
    """Payoff J of the control recorded by the feedback process."""
    process = run_process(strategy, s_star, mu_star, partition, step)
    return payoff_J(strategy.model, s_star, mu_star, process.control, step)


def process_payoff(model: ControlModel, process: ProcessResult) -> float:
    return running_cost_integral(model, process.trajectory, process.control) + float(
        model.terminal_cost(process.trajectory.final)
    )


@dataclass(frozen=True)
class ComplexSearchResult:
    complex: ParameterComplex
    partition_steps: int
    margins: tuple[float, ...]
    attempts: tuple[tuple[float, int, float], ...]
    strategy: Optional[FeedbackStrategy] = None


def search_parameter_complex(
    model: ControlModel,
    dictionary: ValueDictionary,
    scenarios: Sequence[StartPoint],
    eta: float,
    kappa_grid: Sequence[float] = DEFAULT_KAPPA_GRID,
    partition_steps: Sequence[int] = DEFAULT_PARTITION_STEPS,
    epsilon_grid: Sequence[float] = DEFAULT_EPSILON_GRID,
    step: float = DEFAULT_STEP,
) -> ComplexSearchResult:
    """Nested search for (kappa, alpha, epsilon) with J <= phi(s*, mu*) + eta on every scenario.

    Kappa runs from large to small and is skipped when rho1(kappa) >= 1; for
    each kappa the uniform partitions are tried from coarse to fine, and the
    first epsilon with epsilon <= alpha_lo^2 is attached, alpha_lo = sqrt(epsilon).

    Raises:
        ValidationError: If there are no scenarios or a scenario is off the dictionary.
        NumericalError: If no grid point passes; the message carries the best margins.
    """
    eta = validate_nonnegative(eta, "eta")
    if not scenarios:
        raise ValidationError("Invalid scenarios: at least one scenario is required.")
    targets = [dictionary.value_at(s, mu) + eta for s, mu in scenarios]

    attempts: list[tuple[float, int, float]] = []
    best: tuple[float, tuple[float, ...]] = (-math.inf, ())
    for kappa in sorted(kappa_grid, reverse=True):
        rho1 = dictionary.rho1(kappa)
        if rho1 >= 1.0:
            logger.info("kappa=%g skipped: rho1 = %.4g", kappa, rho1)
            continue
        for n in partition_steps:
            partitions = [Partition.uniform(s, model.horizon, n) for s, _ in scenarios]
            alpha_lo = min(p.min_step for p in partitions)
            alpha_hi = max(p.max_step for p in partitions)
            admissible = [e for e in epsilon_grid if 0 < e <= alpha_lo**2]
            if not admissible:
                logger.info("kappa=%g, n=%d skipped: no epsilon below alpha^2", kappa, n)
                continue

            # Every pair of the run carries the epsilon the complex reports.
            epsilon = admissible[0]
            strategy = FeedbackStrategy(model, dictionary, kappa, epsilon)

            margins = tuple(
                target - process_payoff(model, run_process(strategy, s, mu, partition, step))
                for target, (s, mu), partition in zip(targets, scenarios, partitions)
            )
            worst = min(margins)
            attempts.append((kappa, n, worst))
            logger.info("kappa=%g, n=%d: worst margin %.6g", kappa, n, worst)
            if worst > best[0]:
                best = (worst, margins)
            if worst >= 0:
                found = ParameterComplex(
                    kappa=kappa,
                    epsilon=epsilon,
                    alpha_lo=min(math.sqrt(epsilon), alpha_lo),
                    alpha_hi=alpha_hi,
                    eta=eta,
                )
                return ComplexSearchResult(found, n, margins, tuple(attempts), strategy)

    raise NumericalError(
        f"No parameter complex passed the bound with eta = {eta}. "
        f"Best margins: {', '.join(f'{m:.6g}' for m in best[1]) or 'none evaluated'}."
    )


@dataclass(frozen=True)
class ScenarioBound:
    scenario_id: int
    s: float
    dictionary_value: float
    payoff: float
    value: float
    feedback_margin: float
    value_margin: float
    worst_hamiltonian_margin: float


@dataclass(frozen=True, eq=False)
class BoundReport:
    kind: str
    rows: tuple[ScenarioBound, ...]
    tol: float
    audits: tuple[tuple[AuditRecord, ...], ...] = ()
    cone_members: tuple[bool, ...] = ()

    @property
    def passed(self) -> bool:
        if self.kind == "upper":
            return all(
                row.feedback_margin >= 0 and row.value_margin >= -self.tol for row in self.rows
            )
        return all(row.value_margin >= -self.tol for row in self.rows)

    @property
    def worst(self) -> float:
        if self.kind == "upper":
            return min(min(r.feedback_margin, r.value_margin) for r in self.rows)
        return min(r.value_margin for r in self.rows)

    def csv_rows(self) -> list[list[Any]]:
        return [
            [
                row.scenario_id,
                row.s,
                row.dictionary_value,
                row.payoff,
                row.value,
                row.feedback_margin,
                row.value_margin,
                row.worst_hamiltonian_margin,
            ]
            for row in self.rows
        ]


BOUND_COLUMNS = [
    "scenario_id",
    "s",
    "dictionary_value",
    "payoff",
    "value",
    "feedback_margin",
    "value_margin",
    "worst_hamiltonian_margin",
]


def _terminal_hypothesis(
    model: ControlModel, dictionary: ValueDictionary, upper: bool, tol: float
) -> None:
    terminal = np.nonzero(np.abs(dictionary.times - model.horizon) <= _TIME_EPS)[0]
    if terminal.size == 0:
        raise HypothesisError(
            f"Dictionary has no entries at the horizon T = {model.horizon}; "
            "the terminal comparison with G cannot be checked."
        )
    for k in terminal:
        g = float(model.terminal_cost(dictionary.measures[k]))
        v = float(dictionary.values[k])
        if (upper and v < g - tol) or (not upper and v > g + tol):
            relation = ">=" if upper else "<="
            raise HypothesisError(
                f"Terminal hypothesis fails at entry {int(k)}: value {v:.6g} is not "
                f"{relation} G = {g:.6g}."
            )


def _validate_scenarios(scenarios: Sequence[StartPoint], horizon: float) -> None:
    if not scenarios:
        raise ValidationError("Invalid scenarios: at least one scenario is required.")
    for s, _ in scenarios:
        if not 0.0 <= s < horizon:
            raise ValidationError(f"Invalid scenario time: s = {s} must lie in [0, {horizon}).")


def upper_bound_check(
    model: ControlModel,
    dictionary: ValueDictionary,
    scenarios: Sequence[StartPoint],
    eta: float,
    kappa: float,
    partition_steps: int,
    value_steps: Optional[int] = None,
    epsilon: float = 0.0,
    step: float = DEFAULT_STEP,
    oracle: Optional[ValueOracle] = None,
    tol: float = DEFAULT_TOLERANCES.margin,
) -> BoundReport:
    """Check J <= phi(s*, mu*) + eta for the aiming feedback, and Val <= phi + eta.

    Raises:
        HypothesisError: If phi(T, .) >= G fails on a terminal entry.
    """
    eta = validate_nonnegative(eta, "eta")
    _validate_scenarios(scenarios, model.horizon)
    _terminal_hypothesis(model, dictionary, upper=True, tol=DEFAULT_TOLERANCES.metric)
    oracle = oracle or ValueOracle(model, step)
    strategy = FeedbackStrategy(model, dictionary, kappa, epsilon, sign="sub")

    rows, audits = [], []
    for k, (s, mu) in enumerate(scenarios):
        phi = dictionary.value_at(s, mu)
        process = run_process(strategy, s, mu, Partition.uniform(s, model.horizon, partition_steps), step)
        payoff = process_payoff(model, process)
        value = oracle.value(ValueQuery(s, mu, value_steps or partition_steps)).value
        worst_h = max(record.hamiltonian_margin for record in process.audit)
        rows.append(
            ScenarioBound(k, s, phi, payoff, value, phi + eta - payoff, phi + eta - value, worst_h)
        )
        audits.append(process.audit)
        logger.info("Upper bound scenario %d: phi %.6g, J %.6g, Val %.6g", k, phi, payoff, value)
    return BoundReport("upper", tuple(rows), tol, tuple(audits))


def lower_bound_check(
    model: ControlModel,
    dictionary: ValueDictionary,
    scenarios: Sequence[StartPoint],
    n_steps: int,
    kappa: float,
    epsilon: float = 0.0,
    step: float = DEFAULT_STEP,
    oracle: Optional[ValueOracle] = None,
    tol: float = 1e-2,
) -> BoundReport:
    """Check J[s*, mu*, xi] >= psi(s*, mu*) - tol over every searched control.

    The minimum over the searched class is the exact value search, so one
    comparison per scenario covers every control. Along the optimal control the
    sup-envelope pairs are audited at the partition points: their Hamiltonian
    margins a + H + C(D) epsilon and membership of gamma in the plus cone.

    Raises:
        HypothesisError: If psi(T, .) <= G fails on a terminal entry.
        ValidationError: If epsilon >= alpha^2 for the uniform step alpha.
    """
    _validate_scenarios(scenarios, model.horizon)
    _terminal_hypothesis(model, dictionary, upper=False, tol=DEFAULT_TOLERANCES.metric)
    oracle = oracle or ValueOracle(model, step)
    kappa = validate_positive(kappa, "kappa")

    rows, audits, cones = [], [], []
    for k, (s, mu) in enumerate(scenarios):
        partition = Partition.uniform(s, model.horizon, n_steps)
        if epsilon >= partition.min_step**2 and epsilon > 0:
            raise ValidationError(
                f"Invalid epsilon: {epsilon} must be below alpha^2 = {partition.min_step**2:.6g}."
            )
        psi = dictionary.value_at(s, mu)
        result = oracle.value(ValueQuery(s, mu, n_steps))
        trajectory = solve_continuity(model, s, model.horizon, mu, result.control, step)

        c_d = c_of_D(model, trajectory.measures)
        records = []
        for i, t_i in enumerate(partition.times[:-1]):
            k_i = int(np.argmin(np.abs(trajectory.times - t_i)))
            measure = trajectory.measure(k_i)
            envelope, pair = proximal_pair(
                dictionary, float(t_i), measure, kappa, "super", epsilon, model.horizon
            )
            p = pair.barycenter()
            value = hamiltonian(model, pair.anchor_t, p.measure, p).value
            records.append(
                AuditRecord(
                    step=i,
                    s=float(t_i),
                    anchor_t=pair.anchor_t,
                    anchor_distance=envelope.diagnostics.anchor_distance,
                    a=pair.a,
                    chosen=result.indices[i],
                    chosen_label=model.control_label(result.indices[i]),
                    hamiltonian_margin=pair.a + value + c_d * epsilon,
                    gated=pair.gated,
                    objective=(),
                    pair=pair,
                )
            )
            cones.append(
                displacement_cone_check(
                    pair.gamma, pair.anchor_measure, scale=kappa**-2, cone="plus"
                ).member
            )

        worst_h = min(record.hamiltonian_margin for record in records)
        rows.append(
            ScenarioBound(k, s, psi, result.value, result.value, math.nan, result.value - psi, worst_h)
        )
        audits.append(tuple(records))
        logger.info("Lower bound scenario %d: psi %.6g, Val %.6g", k, psi, result.value)
    return BoundReport("lower", tuple(rows), tol, tuple(audits), tuple(cones))
