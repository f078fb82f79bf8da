"""Moreau-Yosida envelopes over a finite value dictionary and subgradient checkers.

A `ValueDictionary` is a finite table of (t, measure, value) entries standing in
for a value function on a neighbourhood of the reachable set. The inf-envelope

    phi_kappa(s, mu) = min_k  v_k + (|t_k - s|^2 + W2^2(mu, nu_k)) / (2 kappa^2)

is minimized exactly, so the anchor entry is a true minimizer and every pair
extracted from it can be tested against the proximal and directional
subdifferential inequalities by brute force.
"""

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Optional, Union

import numpy as np

from wassprox.config import DEFAULT_H_SEQUENCE, DEFAULT_TOLERANCES, Tolerances
from wassprox.measure_core import (
    CotangentSample,
    CovectorField,
    GluedCoupling,
    ParticleMeasure,
    TransportPlan,
    VelocityField,
    _row_groups,
    barycenter,
    glue_plans,
    squared_distances,
    wasserstein2,
)
from wassprox.utils.validators import (
    ProbeError,
    ValidationError,
    validate_choice,
    validate_finite_array,
    validate_nonnegative,
    validate_positive,
    validate_sign,
)

logger = logging.getLogger(__name__)

Evaluable = Callable[[float, ParticleMeasure], float]

# Two entry times closer than this index the same time slice.
_TIME_MATCH = 1e-12


@dataclass(frozen=True, eq=False)
class DictionaryEntry:
    t: float
    measure: ParticleMeasure
    value: float


class EmpiricalModulus:
    """Least concave nondecreasing majorant of observed (distance, increment) pairs.

    Knots run from (0, 0) to the largest observed increment; beyond the last
    knot the modulus is constant.
    """

    def __init__(self, distances: np.ndarray, increments: np.ndarray) -> None:
        distances = np.asarray(distances, dtype=float).reshape(-1)
        increments = np.asarray(increments, dtype=float).reshape(-1)
        keep = distances > 0
        distances, increments = distances[keep], increments[keep]

        if distances.size == 0:
            self.knots = np.array([0.0])
            self.levels = np.array([0.0])
            return

        unique, inverse = np.unique(distances, return_inverse=True)
        peaks = np.full(unique.shape[0], -np.inf)
        np.maximum.at(peaks, np.asarray(inverse).reshape(-1), increments)

        hull: list[tuple[float, float]] = [(0.0, 0.0)]
        for point in zip(unique.tolist(), peaks.tolist()):
            while len(hull) >= 2 and _cross(hull[-2], hull[-1], point) >= 0:
                hull.pop()
            hull.append(point)

        top = int(np.argmax([level for _, level in hull]))
        hull = hull[: top + 1]
        self.knots = np.array([x for x, _ in hull])
        self.levels = np.array([y for _, y in hull])

    def __call__(self, r: Any) -> Any:
        value = np.interp(np.maximum(r, 0.0), self.knots, self.levels)
        return float(value) if np.ndim(value) == 0 else value

    def __repr__(self) -> str:
        return f"EmpiricalModulus(knots={self.knots.size}, sup={self.levels[-1]:.6g})"


def _cross(o: tuple[float, float], a: tuple[float, float], b: tuple[float, float]) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


EntryLike = Union[DictionaryEntry, tuple[float, ParticleMeasure, float]]


class ValueDictionary:
    """Immutable finite table of (t, measure, value) entries.

    Args:
        entries: Dictionary entries or (t, measure, value) tuples.
        c0: Declared bound on |value|; defaults to the observed maximum.
        tolerances: Metric tolerance for lookups and modulus checks.

    Raises:
        ValidationError: If the table is empty, mixes dimensions, c0 is too
            small, or two entries at distance zero carry different values.
    """

    def __init__(
        self,
        entries: Iterable[EntryLike],
        c0: Optional[float] = None,
        tolerances: Tolerances = DEFAULT_TOLERANCES,
    ) -> None:
        parsed = [
            entry if isinstance(entry, DictionaryEntry) else DictionaryEntry(*entry)
            for entry in entries
        ]
        if not parsed:
            raise ValidationError("Invalid dictionary: at least one entry is required.")
        dimensions = {entry.measure.dimension for entry in parsed}
        if len(dimensions) != 1:
            raise ValidationError(
                f"Invalid dictionary: entries mix dimensions {sorted(dimensions)}."
            )

        self.tolerances = tolerances
        self.measures: list[ParticleMeasure] = [entry.measure for entry in parsed]
        self.times = validate_finite_array([e.t for e in parsed], "dictionary times", 1)
        self.values = validate_finite_array([e.value for e in parsed], "dictionary values", 1)
        self.times.setflags(write=False)
        self.values.setflags(write=False)

        observed = float(np.max(np.abs(self.values)))
        if c0 is None:
            c0 = observed
        elif c0 < observed:
            raise ValidationError(
                f"Invalid dictionary bound: c0 = {c0} is below max |value| = {observed}."
            )
        self.c0 = float(c0)

    @classmethod
    def from_function(
        cls,
        fn: Evaluable,
        points: Iterable[tuple[float, ParticleMeasure]],
        **kwargs: Any,
    ) -> "ValueDictionary":
        """Tabulate fn at the given (t, measure) points."""
        return cls([(float(t), m, float(fn(float(t), m))) for t, m in points], **kwargs)

    @classmethod
    def translate_grid(
        cls,
        fn: Evaluable,
        times: Sequence[float],
        template: ParticleMeasure,
        shifts: Sequence[Any],
        **kwargs: Any,
    ) -> "ValueDictionary":
        """Tabulate fn on times x translates of a template measure (time-major order)."""
        translates = [template.translate(shift) for shift in shifts]
        return cls.from_function(fn, ((t, m) for t in times for m in translates), **kwargs)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def __repr__(self) -> str:
        return f"ValueDictionary(entries={len(self)}, d={self.dimension}, c0={self.c0:.6g})"

    @property
    def dimension(self) -> int:
        return self.measures[0].dimension

    @property
    def entries(self) -> list[DictionaryEntry]:
        return [
            DictionaryEntry(float(t), m, float(v))
            for t, m, v in zip(self.times, self.measures, self.values)
        ]

    @property
    def oscillation(self) -> float:
        return float(np.max(self.values) - np.min(self.values))

    def with_values(self, values: Sequence[float]) -> "ValueDictionary":
        """Same (t, measure) grid carrying new values."""
        if len(values) != len(self):
            raise ValidationError(
                f"Invalid dictionary values: expected {len(self)}, got {len(values)}."
            )
        table = ValueDictionary(
            zip(self.times.tolist(), self.measures, [float(v) for v in values]),
            tolerances=self.tolerances,
        )
        if "squared_distance_matrix" in self.__dict__:
            table.__dict__["squared_distance_matrix"] = self.squared_distance_matrix
        return table

    def shifted(self, delta: float, horizon: Optional[float] = None) -> "ValueDictionary":
        """Values plus delta, leaving entries at t = horizon unchanged when given."""
        keep = (
            np.zeros(len(self), dtype=bool)
            if horizon is None
            else np.abs(self.times - horizon) <= _TIME_MATCH
        )
        return self.with_values(np.where(keep, self.values, self.values + delta).tolist())

    @cached_property
    def squared_distance_matrix(self) -> np.ndarray:
        """|t_i - t_j|^2 + W2^2(nu_i, nu_j) for all entry pairs."""
        size = len(self)
        if all(m.is_dirac for m in self.measures):
            points = np.stack([m.points[0] for m in self.measures])
            delta = points[:, None, :] - points[None, :, :]
            matrix = np.einsum("ijd,ijd->ij", delta, delta)
            matrix += (self.times[:, None] - self.times[None, :]) ** 2
            matrix.setflags(write=False)
            return matrix

        matrix = np.zeros((size, size))
        for i in range(size - 1):
            row = squared_distances(self.measures[i], self.measures[i + 1 :], self.tolerances)
            row = row + (self.times[i + 1 :] - self.times[i]) ** 2
            matrix[i, i + 1 :] = row
            matrix[i + 1 :, i] = row
        matrix.setflags(write=False)
        return matrix

    @cached_property
    def modulus(self) -> EmpiricalModulus:
        """Empirical modulus of continuity omega over all entry pairs."""
        upper = np.triu_indices(len(self), k=1)
        distances = np.sqrt(self.squared_distance_matrix[upper])
        increments = np.abs(self.values[upper[0]] - self.values[upper[1]])

        clash = (distances <= self.tolerances.metric) & (increments > self.tolerances.metric)
        if np.any(clash):
            first = int(np.argmax(clash))
            raise ValidationError(
                f"Invalid dictionary: entries {upper[0][first]} and {upper[1][first]} "
                f"coincide but carry values {self.values[upper[0][first]]!r} "
                f"and {self.values[upper[1][first]]!r}."
            )
        omega = EmpiricalModulus(distances, increments)
        logger.debug("Fitted %r on %d entries", omega, len(self))
        return omega

    def anchor_radius(self, kappa: float) -> float:
        """Anchor distance bound kappa * sqrt(2 * oscillation) for on-table queries."""
        return kappa * math.sqrt(2.0 * self.oscillation)

    def rho1(self, kappa: float) -> float:
        """Refined anchor distance bound min(kappa sqrt(2 omega(radius)), radius)."""
        radius = self.anchor_radius(kappa)
        return min(kappa * math.sqrt(2.0 * self.modulus(radius)), radius)

    def rho3(self, kappa: float) -> float:
        """Envelope gap bound omega(kappa rho') + rho'/2, rho' = sqrt(2 omega(2 kappa sqrt(c0)))."""
        rho_prime = math.sqrt(2.0 * self.modulus(2.0 * kappa * math.sqrt(self.c0)))
        return self.modulus(kappa * rho_prime) + 0.5 * rho_prime

    def index_of(self, t: float, measure: ParticleMeasure) -> Optional[int]:
        """Index of the first entry at (t, measure), or None."""
        candidates = np.nonzero(np.abs(self.times - t) <= _TIME_MATCH)[0]
        for k in candidates:
            if self.measures[k] is measure or self.measures[k].same_as(measure):
                return int(k)
        same_dimension = [
            int(k) for k in candidates if self.measures[k].dimension == measure.dimension
        ]
        if not same_dimension:
            return None
        sq = squared_distances(measure, [self.measures[k] for k in same_dimension])
        close = np.nonzero(sq <= self.tolerances.metric**2)[0]
        return same_dimension[int(close[0])] if close.size else None

    def value_at(self, t: float, measure: ParticleMeasure) -> float:
        """Stored value at an entry.

        Raises:
            ValidationError: If (t, measure) is not a dictionary entry.
        """
        index = self.index_of(t, measure)
        if index is None:
            raise ValidationError(
                f"No dictionary entry at t={t!r} for {measure!r}; "
                "evaluate off-table points with a callable instead."
            )
        return float(self.values[index])

    __call__ = value_at

    def rows(self) -> list[list[Any]]:
        """(entry_id, t, value, support size) rows for CSV export."""
        return [
            [k, float(t), float(v), m.size]
            for k, (t, m, v) in enumerate(zip(self.times, self.measures, self.values))
        ]


@dataclass(frozen=True)
class RegularizationDiagnostics:
    """Anchor bounds and Ekeland residuals of one envelope query.

    `ekeland_residuals[0]` is phi(s, mu) - phi_kappa(s, mu) (NaN off the table),
    `ekeland_residuals[1]` the cost gap between the anchor and the runner-up entry.
    """

    rho1: float
    rho3: float
    anchor_radius: float
    anchor_distance: float
    ekeland_residuals: tuple[float, float]
    query_index: Optional[int] = None

    @property
    def within_bounds(self) -> bool:
        if self.query_index is None:
            return True
        return self.anchor_distance <= self.rho1 + DEFAULT_TOLERANCES.metric


@dataclass(frozen=True, eq=False)
class EnvelopeResult:
    value: float
    anchor_index: int
    anchor_t: float
    anchor_measure: ParticleMeasure
    plan: TransportPlan
    diagnostics: RegularizationDiagnostics
    sign: str = "sub"

    @property
    def anchor(self) -> tuple[float, ParticleMeasure]:
        return self.anchor_t, self.anchor_measure


def _envelope(
    dictionary: ValueDictionary,
    s: float,
    mu: ParticleMeasure,
    kappa: float,
    sign: str,
) -> EnvelopeResult:
    kappa = validate_positive(kappa, "kappa")
    if mu.dimension != dictionary.dimension:
        raise ValidationError(
            f"Measure dimension {mu.dimension} does not match dictionary "
            f"dimension {dictionary.dimension}."
        )
    values = dictionary.values if sign == "sub" else -dictionary.values
    sq = (dictionary.times - s) ** 2 + squared_distances(
        mu, dictionary.measures, dictionary.tolerances
    )
    costs = values + sq / (2.0 * kappa**2)

    k = int(np.argmin(costs))
    best = float(costs[k])
    anchor_measure = dictionary.measures[k]
    _, plan = wasserstein2(mu, anchor_measure, dictionary.tolerances)

    matches = np.nonzero(sq <= dictionary.tolerances.metric**2)[0]
    query_index = int(matches[0]) if matches.size else None
    on_table = float(values[query_index]) - best if query_index is not None else math.nan
    runner_up = float(np.min(np.delete(costs, k)) - best) if len(dictionary) > 1 else 0.0

    diagnostics = RegularizationDiagnostics(
        rho1=dictionary.rho1(kappa),
        rho3=dictionary.rho3(kappa),
        anchor_radius=dictionary.anchor_radius(kappa),
        anchor_distance=math.sqrt(max(float(sq[k]), 0.0)),
        ekeland_residuals=(on_table, runner_up),
        query_index=query_index,
    )
    if not diagnostics.within_bounds:
        logger.warning(
            "Anchor distance %.6g exceeds rho1 %.6g at s=%g",
            diagnostics.anchor_distance,
            diagnostics.rho1,
            s,
        )
    return EnvelopeResult(
        value=best if sign == "sub" else -best,
        anchor_index=k,
        anchor_t=float(dictionary.times[k]),
        anchor_measure=anchor_measure,
        plan=plan,
        diagnostics=diagnostics,
        sign=sign,
    )


def moreau_yosida_inf(
    dictionary: ValueDictionary, s: float, mu: ParticleMeasure, kappa: float
) -> EnvelopeResult:
    """Inf-envelope phi_kappa(s, mu) with its exact anchor entry and plan mu -> anchor.

    Ties between entries go to the lowest index.
    """
    return _envelope(dictionary, s, mu, kappa, "sub")


def moreau_yosida_sup(
    dictionary: ValueDictionary, s: float, mu: ParticleMeasure, kappa: float
) -> EnvelopeResult:
    """Sup-envelope psi^kappa(s, mu) = -(-psi)_kappa(s, mu)."""
    return _envelope(dictionary, s, mu, kappa, "super")


@dataclass(frozen=True, eq=False)
class ProximalPair:
    """Time derivative `a` and cotangent sample `gamma` extracted from an anchor.

    The pair is a proximal sub- (or super-) gradient at (anchor_t, anchor_measure);
    `gamma` lives on the anchor support.
    """

    a: float
    gamma: CotangentSample
    kappa: float
    epsilon: float
    anchor_t: float
    anchor_measure: ParticleMeasure
    plan: TransportPlan
    sign: str
    query_t: float
    query_measure: ParticleMeasure
    gated: bool = False
    rho1: Optional[float] = None

    @property
    def anchor_index(self) -> np.ndarray:
        """Anchor support index of every gamma atom."""
        return self.plan.cols

    def barycenter(self) -> CovectorField:
        return barycenter(self.gamma)

    def anchor_covector(self) -> CovectorField:
        """Barycenter of gamma on the anchor support, in the anchor's own point order."""
        anchor = self.anchor_measure
        sums = np.zeros_like(anchor.points)
        np.add.at(sums, self.plan.cols, self.gamma.masses[:, None] * self.gamma.covectors)
        values = np.divide(
            sums,
            anchor.weights[:, None],
            out=np.zeros_like(sums),
            where=anchor.weights[:, None] > 0,
        )
        return CovectorField(anchor, values)

    def source_covector(self) -> CovectorField:
        """Plan barycenter of the covectors pulled back to the query support."""
        mu = self.query_measure
        sums = np.zeros_like(mu.points)
        np.add.at(sums, self.plan.rows, self.gamma.masses[:, None] * self.gamma.covectors)
        values = np.divide(
            sums, mu.weights[:, None], out=np.zeros_like(sums), where=mu.weights[:, None] > 0
        )
        return CovectorField(mu, values)


def proximal_pair_from_anchor(
    s: float,
    mu: ParticleMeasure,
    anchor_t: float,
    anchor_measure: ParticleMeasure,
    plan: TransportPlan,
    kappa: float,
    epsilon: float = 0.0,
    sign: str = "sub",
    horizon: Optional[float] = None,
    rho1: Optional[float] = None,
) -> ProximalPair:
    """Build (a, gamma) from an envelope anchor.

    For sign "sub": a = (s - anchor_t) / kappa^2 and gamma carries the atoms
    (y_j, (x_i - y_j) / kappa^2) with the plan masses; "super" flips both signs.
    The pair is gated when rho1 < min(1, s, horizon - s).

    Raises:
        ValidationError: If the plan does not couple mu to the anchor measure.
    """
    sign = validate_sign(sign)
    kappa = validate_positive(kappa, "kappa")
    epsilon = validate_nonnegative(epsilon, "epsilon")
    if not (plan.source is mu or plan.source.same_as(mu)):
        raise ValidationError("Invalid proximal pair: plan source is not the query measure.")
    if not (plan.target is anchor_measure or plan.target.same_as(anchor_measure)):
        raise ValidationError("Invalid proximal pair: plan target is not the anchor measure.")

    scale = kappa**-2
    direction = 1.0 if sign == "sub" else -1.0
    displacement = mu.points[plan.rows] - anchor_measure.points[plan.cols]
    gamma = CotangentSample(
        anchor_measure.points[plan.cols],
        direction * scale * displacement,
        plan.masses / plan.masses.sum(),
    )

    gated = (
        rho1 is not None and horizon is not None and rho1 < min(1.0, s, horizon - s)
    )
    return ProximalPair(
        a=direction * scale * (s - anchor_t),
        gamma=gamma,
        kappa=kappa,
        epsilon=epsilon,
        anchor_t=float(anchor_t),
        anchor_measure=anchor_measure,
        plan=plan,
        sign=sign,
        query_t=float(s),
        query_measure=mu,
        gated=bool(gated),
        rho1=rho1,
    )


def proximal_pair(
    dictionary: ValueDictionary,
    s: float,
    mu: ParticleMeasure,
    kappa: float,
    sign: str = "sub",
    epsilon: float = 0.0,
    horizon: Optional[float] = None,
) -> tuple[EnvelopeResult, ProximalPair]:
    """Envelope query followed by pair extraction at its anchor."""
    sign = validate_sign(sign)
    envelope = _envelope(dictionary, s, mu, kappa, sign)
    pair = proximal_pair_from_anchor(
        s,
        mu,
        envelope.anchor_t,
        envelope.anchor_measure,
        envelope.plan,
        kappa,
        epsilon=epsilon,
        sign=sign,
        horizon=horizon,
        rho1=envelope.diagnostics.rho1,
    )
    return envelope, pair


@dataclass(frozen=True, eq=False)
class SubgradientProbe:
    """Probe point (t, measure) with a coupling beta of atoms (x, x', q, mass)."""

    t: float
    measure: ParticleMeasure
    base_points: np.ndarray
    probe_points: np.ndarray
    covectors: np.ndarray
    masses: np.ndarray


@dataclass(frozen=True)
class ProbeReport:
    """Per-probe margins; a nonnegative worst margin means every probe passed."""

    margins: tuple[float, ...]
    probe_ids: tuple[int, ...]
    sigma: float = 0.0
    sigma_fitted: bool = False
    rejected: tuple[tuple[int, str], ...] = ()

    @property
    def worst(self) -> float:
        return min(self.margins) if self.margins else math.inf

    def passed(self, tol: float = DEFAULT_TOLERANCES.probe) -> bool:
        return self.worst >= -tol

    def rows(self, tol: float = DEFAULT_TOLERANCES.probe) -> list[list[Any]]:
        """(probe_id, margin, status) rows, rejected probes included."""
        rows: list[list[Any]] = [
            [k, margin, "pass" if margin >= -tol else "fail"]
            for k, margin in zip(self.probe_ids, self.margins)
        ]
        rows.extend([k, math.nan, f"rejected: {reason}"] for k, reason in self.rejected)
        return sorted(rows, key=lambda row: row[0])


def _marginal_gap(
    left_rows: np.ndarray, left_masses: np.ndarray, right_rows: np.ndarray, right_masses: np.ndarray
) -> float:
    """Largest mass difference between two atomic measures given by row keys."""
    combined = np.vstack([left_rows, right_rows])
    unique, inverse = _row_groups(combined)
    split = left_rows.shape[0]
    left = np.bincount(inverse[:split], weights=left_masses, minlength=unique.shape[0])
    right = np.bincount(inverse[split:], weights=right_masses, minlength=unique.shape[0])
    return float(np.max(np.abs(left - right)))


def validate_probe(
    probe: SubgradientProbe, gamma: CotangentSample, tolerances: Tolerances = DEFAULT_TOLERANCES
) -> None:
    """Check p^{1,3} beta = gamma and p^2 beta = probe measure.

    Raises:
        ProbeError: On malformed atoms or a marginal mismatch.
    """
    shapes = {
        np.shape(probe.base_points),
        np.shape(probe.probe_points),
        np.shape(probe.covectors),
    }
    if len(shapes) != 1 or np.shape(probe.masses) != (np.shape(probe.base_points)[0],):
        raise ProbeError("Invalid probe: atom arrays have mismatched shapes.")
    if np.any(np.asarray(probe.masses) < 0):
        raise ProbeError("Invalid probe: masses must be nonnegative.")

    gap = _marginal_gap(
        np.hstack([gamma.points, gamma.covectors]),
        gamma.masses,
        np.hstack([probe.base_points, probe.covectors]),
        probe.masses,
    )
    if gap > tolerances.marginal:
        raise ProbeError(f"Invalid probe: (x, q) marginal differs from gamma by {gap:.3g}.")
    gap = _marginal_gap(
        probe.probe_points, probe.masses, probe.measure.points, probe.measure.weights
    )
    if gap > tolerances.marginal:
        raise ProbeError(f"Invalid probe: x' marginal differs from the probe measure by {gap:.3g}.")


def lift_probe(pair: ProximalPair, t: float, plan: TransportPlan) -> SubgradientProbe:
    """Glue gamma with a plan anchor -> nu conditionally on the base point.

    Raises:
        ValidationError: If the plan does not start at the anchor measure.
    """
    anchor = pair.anchor_measure
    if not (plan.source is anchor or plan.source.same_as(anchor)):
        raise ValidationError("Cannot lift probe: plan source is not the anchor measure.")

    base, moved, covectors, masses = [], [], [], []
    for k, j in enumerate(pair.anchor_index):
        outgoing = np.nonzero(plan.rows == j)[0]
        for e in outgoing:
            base.append(anchor.points[j])
            moved.append(plan.target.points[plan.cols[e]])
            covectors.append(pair.gamma.covectors[k])
            masses.append(pair.gamma.masses[k] * plan.masses[e] / anchor.weights[j])

    return SubgradientProbe(
        t=float(t),
        measure=plan.target,
        base_points=np.asarray(base),
        probe_points=np.asarray(moved),
        covectors=np.asarray(covectors),
        masses=np.asarray(masses),
    )


def random_pair_probes(
    pair: ProximalPair,
    rng: np.random.Generator,
    count: int = 50,
    scale: float = 0.5,
    horizon: Optional[float] = None,
) -> list[SubgradientProbe]:
    """Probes at randomly displaced anchor supports and perturbed anchor times.

    Probe times are clipped to [0, horizon], or to t >= 0 without a horizon.
    """
    anchor = pair.anchor_measure
    upper = math.inf if horizon is None else float(horizon)
    probes = []
    for _ in range(count):
        images = anchor.points + rng.normal(scale=scale, size=anchor.points.shape)
        t = float(np.clip(pair.anchor_t + rng.normal(scale=scale), 0.0, upper))
        probes.append(lift_probe(pair, t, TransportPlan.from_map(anchor, images)))
    return probes


def dictionary_probes(
    pair: ProximalPair,
    dictionary: ValueDictionary,
    indices: Optional[Iterable[int]] = None,
) -> list[SubgradientProbe]:
    """Probes at dictionary entries, coupled to the anchor by an optimal plan."""
    chosen = range(len(dictionary)) if indices is None else indices
    probes = []
    for k in chosen:
        _, plan = wasserstein2(pair.anchor_measure, dictionary.measures[k], dictionary.tolerances)
        probes.append(lift_probe(pair, float(dictionary.times[k]), plan))
    return probes


def check_prox_subgradient(
    phi: Evaluable,
    s: float,
    mu: ParticleMeasure,
    pair: ProximalPair,
    probes: Sequence[SubgradientProbe],
    sigma: Optional[float] = None,
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> ProbeReport:
    """Brute-force the proximal epsilon-subgradient inequality at (s, mu).

    For each probe the margin is

        sgn * [phi(t, nu) - phi(s, mu) - a (t - s) - int q.(x' - x) dbeta]
            + sigma * [(t - s)^2 + int |x' - x|^2 dbeta]
            + epsilon * ((t - s)^2 + W2^2(nu, mu))^(1/2)

    with sgn = +1 for sub- and -1 for super-gradients. Without a given sigma,
    the smallest nonnegative sigma making every probe pass is fitted and reported.
    Probes with wrong marginals are rejected and listed, not fatal.
    """
    direction = 1.0 if pair.sign == "sub" else -1.0
    base_value = float(phi(s, mu))

    raw: list[float] = []
    quads: list[float] = []
    ids: list[int] = []
    rejected: list[tuple[int, str]] = []
    for k, probe in enumerate(probes):
        try:
            validate_probe(probe, pair.gamma, tolerances)
        except ProbeError as e:
            logger.warning("Probe %d rejected: %s", k, e)
            rejected.append((k, str(e)))
            continue

        dt = probe.t - s
        displacement = probe.probe_points - probe.base_points
        linear = pair.a * dt + float(
            probe.masses @ np.einsum("ij,ij->i", probe.covectors, displacement)
        )
        quad = dt**2 + float(probe.masses @ np.einsum("ij,ij->i", displacement, displacement))
        slack = 0.0
        if pair.epsilon > 0:
            distance, _ = wasserstein2(probe.measure, mu, tolerances)
            slack = pair.epsilon * math.sqrt(dt**2 + distance**2)

        raw.append(direction * (float(phi(probe.t, probe.measure)) - base_value - linear) + slack)
        quads.append(quad)
        ids.append(k)

    fitted = sigma is None
    if sigma is None:
        ratios = [-r / q for r, q in zip(raw, quads) if q > 0 and r < 0]
        sigma = max([0.0, *ratios])
    sigma = validate_nonnegative(sigma, "sigma")

    margins = tuple(r + sigma * q for r, q in zip(raw, quads))
    report = ProbeReport(margins, tuple(ids), sigma, fitted, tuple(rejected))
    logger.debug(
        "Proximal check: %d probes, worst margin %.3g, sigma %.6g", len(ids), report.worst, sigma
    )
    return report


def random_directions(
    mu: ParticleMeasure,
    rng: np.random.Generator,
    count: int = 20,
    time_scale: float = 1.0,
) -> list[tuple[float, VelocityField]]:
    """Gaussian (theta, v) directions with v defined on the support of mu."""
    return [
        (float(rng.normal(scale=time_scale)), VelocityField(mu, rng.normal(size=mu.points.shape)))
        for _ in range(count)
    ]


def check_directional_subgradient(
    phi: Evaluable,
    s: float,
    mu: ParticleMeasure,
    a: float,
    p: CovectorField,
    epsilon: float,
    directions: Sequence[tuple[float, VelocityField]],
    h_sequence: Sequence[float] = DEFAULT_H_SEQUENCE,
) -> ProbeReport:
    """Difference-quotient test of the directional epsilon-subgradient inequality.

    The liminf over h is replaced by the minimum over `h_sequence`, so a failing
    margin refutes membership while a passing one only fails to refute it.
    Zero directions are skipped and reported as rejected.
    """
    epsilon = validate_nonnegative(epsilon, "epsilon")
    steps = [validate_positive(h, "h") for h in h_sequence]
    if not steps or any(b >= a_ for a_, b in zip(steps, steps[1:])):
        raise ValidationError("Invalid h sequence: must be nonempty and strictly decreasing.")
    if p.measure.points.shape != mu.points.shape or not np.array_equal(
        p.measure.points, mu.points
    ):
        raise ValidationError("Covector field is not defined on the support of mu.")

    base_value = float(phi(s, mu))
    margins: list[float] = []
    ids: list[int] = []
    skipped: list[tuple[int, str]] = []
    for k, (theta, v) in enumerate(directions):
        norm = math.sqrt(theta**2 + v.norm() ** 2)
        if norm == 0.0:
            skipped.append((k, "zero direction skipped"))
            continue
        linear = a * theta + p.pairing(v)
        quotients = [
            (float(phi(s + h * theta, v.displace(h))) - base_value - h * linear) / h
            for h in steps
        ]
        margins.append(min(quotients) + epsilon * norm)
        ids.append(k)

    return ProbeReport(tuple(margins), tuple(ids), rejected=tuple(skipped))


@dataclass(frozen=True, eq=False)
class ShiftProbe:
    """Shifted point (s', mu') with a plan mu -> mu' and an optional glued coupling."""

    s_prime: float
    measure: ParticleMeasure
    plan: TransportPlan
    glued: Optional[GluedCoupling] = field(default=None)


def _pair_mass_gap(glued: dict[tuple[int, int], float], plan: TransportPlan) -> float:
    expected: dict[tuple[int, int], float] = {}
    for i, j, m in plan.entries:
        expected[(i, j)] = expected.get((i, j), 0.0) + m
    keys = set(glued) | set(expected)
    return max((abs(glued.get(k, 0.0) - expected.get(k, 0.0)) for k in keys), default=0.0)


def shift_inequality_check(
    dictionary: ValueDictionary,
    s: float,
    mu: ParticleMeasure,
    kappa: float,
    probes: Sequence[ShiftProbe],
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> ProbeReport:
    """Slack of the first-order expansion of phi_kappa around (s, mu).

    For each probe the slack is RHS - LHS of

        phi_kappa(s', mu') <= phi_kappa(s, mu) + (s - t)(s' - s) / kappa^2
            + int (x - z).(x' - x) dvarpi / kappa^2
            + [(s' - s)^2 + int |x' - x|^2 dpi] / (2 kappa^2)

    where (t, z) is the anchor and varpi glues the anchor plan with pi.
    """
    envelope = moreau_yosida_inf(dictionary, s, mu, kappa)
    scale = kappa**-2

    slacks: list[float] = []
    ids: list[int] = []
    rejected: list[tuple[int, str]] = []
    for k, probe in enumerate(probes):
        try:
            plan = probe.plan
            if not (plan.source is mu or plan.source.same_as(mu)):
                raise ProbeError("Invalid probe: plan source is not the query measure.")
            if not (plan.target is probe.measure or plan.target.same_as(probe.measure)):
                raise ProbeError("Invalid probe: plan target is not the probe measure.")
            glued = probe.glued or glue_plans(envelope.plan, plan)
            gap = max(
                _pair_mass_gap(glued.pair_masses((0, 1)), envelope.plan),
                _pair_mass_gap(glued.pair_masses((0, 2)), plan),
            )
            if gap > tolerances.marginal:
                raise ProbeError(f"Invalid probe: glued marginals off by {gap:.3g}.")
        except (ProbeError, ValidationError) as e:
            logger.warning("Shift probe %d rejected: %s", k, e)
            rejected.append((k, str(e)))
            continue

        x, z, x_prime = glued.points()
        cross = float(glued.masses @ np.einsum("ij,ij->i", x - z, x_prime - x))
        ds = probe.s_prime - s
        rhs = (
            envelope.value
            + scale * (s - envelope.anchor_t) * ds
            + scale * cross
            + 0.5 * scale * (ds**2 + plan.cost())
        )
        lhs = moreau_yosida_inf(dictionary, probe.s_prime, probe.measure, kappa).value
        slacks.append(rhs - lhs)
        ids.append(k)

    return ProbeReport(tuple(slacks), tuple(ids), rejected=tuple(rejected))


@dataclass(frozen=True)
class EnvelopeGap:
    gap: float
    rho3: float
    gaps: np.ndarray

    @property
    def within_bound(self) -> bool:
        return self.gap <= self.rho3 + DEFAULT_TOLERANCES.metric


def envelope_gap(dictionary: ValueDictionary, kappa: float) -> EnvelopeGap:
    """max_k phi(t_k, nu_k) - phi_kappa(t_k, nu_k) against the bound rho3(kappa)."""
    kappa = validate_positive(kappa, "kappa")
    envelope = np.min(
        dictionary.values[None, :] + dictionary.squared_distance_matrix / (2.0 * kappa**2),
        axis=1,
    )
    gaps = dictionary.values - envelope
    return EnvelopeGap(float(np.max(gaps)), dictionary.rho3(kappa), gaps)


@dataclass(frozen=True)
class ConeCheck:
    member: bool
    scale: float
    reason: str = ""


def displacement_cone_check(
    gamma: CotangentSample,
    mu: ParticleMeasure,
    scale: Optional[float] = None,
    cone: str = "minus",
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> ConeCheck:
    """Is gamma induced by x -> c (F(x) - x) with (Id, F)#mu optimal?

    The "plus" cone uses x -> -c (F(x) - x). With a given scale c the map is
    F = Id +- q / c; without one, the smallest c that works is searched by
    bisection on 1/c.

    Raises:
        ValidationError: If the base marginal of gamma is not mu.
    """
    cone = validate_choice(cone, {"minus", "plus"}, "cone")
    base = mu.merged()
    projected = gamma.base_measure()
    if (
        projected.points.shape != base.points.shape
        or not np.allclose(projected.points, base.points, atol=tolerances.metric, rtol=0.0)
        or np.max(np.abs(projected.weights - base.weights)) > tolerances.marginal
    ):
        raise ValidationError("Invalid cotangent sample: base marginal differs from mu.")

    field_ = barycenter(gamma)
    _, inverse = _row_groups(gamma.points)
    spread = float(np.max(np.abs(gamma.covectors - field_.values[inverse])))
    if spread > tolerances.metric * (1.0 + float(np.max(np.abs(gamma.covectors)))):
        return ConeCheck(False, math.nan, "covectors are not a function of the base point")
    if not np.any(field_.values):
        return ConeCheck(True, 0.0, "zero covectors")

    direction = 1.0 if cone == "minus" else -1.0

    def optimal(step: float) -> bool:
        plan = TransportPlan.from_map(base, base.points + direction * step * field_.values)
        _, best = wasserstein2(base, plan.target, tolerances)
        cost = plan.cost()
        return cost - best.cost() <= tolerances.metric * max(1.0, cost)

    if scale is not None:
        scale = validate_positive(scale, "scale")
        if optimal(1.0 / scale):
            return ConeCheck(True, scale)
        return ConeCheck(False, scale, "induced plan is not optimal")

    lo, hi = 0.0, 1.0
    if optimal(hi):
        while hi < 2.0**30 and optimal(2.0 * hi):
            hi *= 2.0
        lo = hi
        hi = 2.0 * hi
        if lo >= 2.0**30:
            return ConeCheck(True, 1.0 / lo)
    else:
        while hi > 2.0**-30 and not optimal(hi / 2.0):
            hi /= 2.0
        if hi <= 2.0**-30:
            return ConeCheck(False, math.nan, "no scale yields an optimal plan")
        lo = hi / 2.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if optimal(mid):
            lo = mid
        else:
            hi = mid
    return ConeCheck(True, 1.0 / lo)
