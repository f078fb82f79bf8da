"""Discrete probability measures, exact W2 geometry, plans and barycenters."""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np
import ot

from wassprox.config import DEFAULT_TOLERANCES, Tolerances
from wassprox.utils.validators import (
    NumericalError,
    ValidationError,
    validate_finite_array,
    validate_probability_vector,
)

logger = logging.getLogger(__name__)

# POT network simplex status for an optimal basis.
_EMD_OPTIMAL = 1


def _as_points(values: Any, name: str = "points") -> np.ndarray:
    """Coerce to an (N, d) array; a flat sequence is read as N points on the line."""
    array = np.array(values, dtype=float)
    if array.ndim == 1:
        array = array.reshape(-1, 1)
    return validate_finite_array(array, name, ndim=2)


def _freeze(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _row_groups(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distinct rows (lexicographic order) and the group index of every input row."""
    unique, inverse = np.unique(rows, axis=0, return_inverse=True)
    return unique, np.asarray(inverse).reshape(-1)


@dataclass(frozen=True, eq=False)
class ParticleMeasure:
    """Weighted finite support representing a measure with finite second moment.

    Attributes:
        points: (N, d) array of support points.
        weights: (N,) array of nonnegative weights summing to one.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        points = _as_points(self.points)
        weights = validate_probability_vector(
            np.array(self.weights, dtype=float).reshape(-1),
            "weights",
            DEFAULT_TOLERANCES.weight_sum,
        )
        if points.shape[0] != weights.shape[0]:
            raise ValidationError(
                f"Invalid measure: {points.shape[0]} points but {weights.shape[0]} weights."
            )
        object.__setattr__(self, "points", _freeze(points))
        object.__setattr__(self, "weights", _freeze(weights))

    @classmethod
    def from_points(cls, points: Any, weights: Optional[Any] = None) -> "ParticleMeasure":
        """Build a measure, defaulting to equal weights."""
        array = _as_points(points)
        if weights is None:
            weights = np.full(array.shape[0], 1.0 / array.shape[0])
        return cls(array, weights)

    @classmethod
    def dirac(cls, point: Any) -> "ParticleMeasure":
        """Unit mass at a single point."""
        return cls(np.array(point, dtype=float).reshape(1, -1), [1.0])

    @property
    def size(self) -> int:
        return int(self.points.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.points.shape[1])

    @property
    def is_dirac(self) -> bool:
        return self.size == 1

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        """Integrate a function evaluated row-wise on the (N, d) support."""
        return float(self.weights @ np.asarray(fn(self.points), dtype=float).reshape(-1))

    def translate(self, shift: Any) -> "ParticleMeasure":
        return ParticleMeasure(self.points + np.asarray(shift, dtype=float), self.weights)

    def merged(self) -> "ParticleMeasure":
        """Merge duplicate points, summing their weights (sorted support)."""
        unique, inverse = _row_groups(self.points)
        if unique.shape[0] == self.size:
            return self
        weights = np.bincount(inverse, weights=self.weights, minlength=unique.shape[0])
        return ParticleMeasure(unique, weights)

    def same_as(self, other: "ParticleMeasure") -> bool:
        """Exact equality of support arrays and weights (atom order matters)."""
        return (
            self.points.shape == other.points.shape
            and bool(np.array_equal(self.points, other.points))
            and bool(np.array_equal(self.weights, other.weights))
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "dimension": self.dimension,
            "points": self.points.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ParticleMeasure":
        """Parse the `dimension` / `points` / `weights` mapping of a measure file."""
        for key in ("dimension", "points", "weights"):
            if key not in data:
                raise ValidationError(f"Invalid measure: missing field '{key}'.")
        measure = cls(_as_points(data["points"]), data["weights"])
        if measure.dimension != int(data["dimension"]):
            raise ValidationError(
                f"Invalid measure: dimension is {data['dimension']} "
                f"but points have {measure.dimension} coordinates."
            )
        return measure

    def __repr__(self) -> str:
        return f"ParticleMeasure(N={self.size}, d={self.dimension})"


def second_moment_root(mu: ParticleMeasure) -> float:
    """Root second moment (sum_i w_i |x_i|^2)^(1/2)."""
    return float(np.sqrt(mu.weights @ np.einsum("ij,ij->i", mu.points, mu.points)))


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Sparse coupling between two particle measures.

    Entry k moves `masses[k]` from `source.points[rows[k]]` to `target.points[cols[k]]`.
    """

    source: ParticleMeasure
    target: ParticleMeasure
    rows: np.ndarray
    cols: np.ndarray
    masses: np.ndarray
    tolerance: float = DEFAULT_TOLERANCES.marginal

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        masses = validate_finite_array(np.asarray(self.masses).reshape(-1), "plan masses", 1)

        if not rows.shape == cols.shape == masses.shape:
            raise ValidationError("Invalid plan: rows, cols and masses must have equal length.")
        if self.source.dimension != self.target.dimension:
            raise ValidationError("Invalid plan: source and target dimensions differ.")
        if np.any(masses < 0):
            raise ValidationError("Invalid plan: masses must be nonnegative.")
        if rows.size and (rows.min() < 0 or rows.max() >= self.source.size):
            raise ValidationError("Invalid plan: row index out of range.")
        if cols.size and (cols.min() < 0 or cols.max() >= self.target.size):
            raise ValidationError("Invalid plan: column index out of range.")

        row_sums = np.bincount(rows, weights=masses, minlength=self.source.size)
        col_sums = np.bincount(cols, weights=masses, minlength=self.target.size)
        if np.max(np.abs(row_sums - self.source.weights)) > self.tolerance:
            raise ValidationError("Invalid plan: row sums do not match source weights.")
        if np.max(np.abs(col_sums - self.target.weights)) > self.tolerance:
            raise ValidationError("Invalid plan: column sums do not match target weights.")

        object.__setattr__(self, "rows", _freeze(rows))
        object.__setattr__(self, "cols", _freeze(cols))
        object.__setattr__(self, "masses", _freeze(masses))

    @classmethod
    def from_matrix(
        cls, source: ParticleMeasure, target: ParticleMeasure, matrix: np.ndarray
    ) -> "TransportPlan":
        """Keep the strictly positive entries of a dense coupling, row-major."""
        rows, cols = np.nonzero(matrix > 0)
        return cls(source, target, rows, cols, matrix[rows, cols])

    @classmethod
    def diagonal(cls, mu: ParticleMeasure) -> "TransportPlan":
        index = np.arange(mu.size)
        return cls(mu, mu, index, index, mu.weights.copy())

    @classmethod
    def from_map(cls, mu: ParticleMeasure, images: Any) -> "TransportPlan":
        """Plan (Id, F)#mu onto the unmerged push-forward F#mu."""
        target = pushforward(mu, images)
        index = np.arange(mu.size)
        return cls(mu, target, index, index, mu.weights.copy())

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        return [
            (int(i), int(j), float(m)) for i, j, m in zip(self.rows, self.cols, self.masses)
        ]

    def as_matrix(self) -> np.ndarray:
        matrix = np.zeros((self.source.size, self.target.size))
        np.add.at(matrix, (self.rows, self.cols), self.masses)
        return matrix

    def displacements(self) -> np.ndarray:
        """Per-entry vectors target point minus source point."""
        return self.target.points[self.cols] - self.source.points[self.rows]

    def cost(self) -> float:
        """Squared plan norm: sum of mass times squared displacement."""
        delta = self.displacements()
        return float(self.masses @ np.einsum("ij,ij->i", delta, delta))

    def transpose(self) -> "TransportPlan":
        return TransportPlan(self.target, self.source, self.cols, self.rows, self.masses)


def plan_norm(plan: TransportPlan) -> float:
    """(integral of |x1 - x2|^2 d plan)^(1/2)."""
    return float(np.sqrt(max(plan.cost(), 0.0)))


def _dirac_plan(mu: ParticleMeasure, nu: ParticleMeasure) -> TransportPlan:
    if mu.is_dirac:
        return TransportPlan(mu, nu, np.zeros(nu.size, dtype=np.int64), np.arange(nu.size), nu.weights)
    return TransportPlan(mu, nu, np.arange(mu.size), np.zeros(mu.size, dtype=np.int64), mu.weights)


def wasserstein2(
    mu: ParticleMeasure,
    nu: ParticleMeasure,
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> tuple[float, TransportPlan]:
    """Exact W2 distance and an optimal plan between two particle measures.

    Diracs use the closed form, the line uses the monotone rearrangement, and
    everything else goes through the POT network simplex.

    Args:
        mu: Source measure.
        nu: Target measure.
        tolerances: Marginal tolerance for the returned plan.

    Returns:
        The distance and a plan attaining it.

    Raises:
        ValidationError: If the dimensions differ.
        NumericalError: If the network simplex does not reach an optimal basis.
    """
    if mu.dimension != nu.dimension:
        raise ValidationError(
            f"Dimension mismatch: source is {mu.dimension}-dimensional, target is {nu.dimension}."
        )

    if mu is nu or mu.same_as(nu):
        return 0.0, TransportPlan.diagonal(mu)

    if mu.is_dirac or nu.is_dirac:
        plan = _dirac_plan(mu, nu)
    elif mu.dimension == 1:
        matrix = ot.emd_1d(
            mu.points[:, 0], nu.points[:, 0], mu.weights, nu.weights, metric="sqeuclidean"
        )
        plan = TransportPlan.from_matrix(mu, nu, np.asarray(matrix))
    else:
        cost_matrix = ot.dist(mu.points, nu.points)
        matrix, log = ot.emd(
            mu.weights, nu.weights, cost_matrix, numItermax=1_000_000, log=True
        )
        if log.get("result_code") != _EMD_OPTIMAL:
            raise NumericalError(
                f"Transport solver did not reach an optimal plan "
                f"(status {log.get('result_code')}): {log.get('warning')}"
            )
        plan = TransportPlan.from_matrix(mu, nu, np.asarray(matrix))

    return plan_norm(plan), plan


def pushforward(mu: ParticleMeasure, images: Any, merge: bool = False) -> ParticleMeasure:
    """Image measure of mu under the map x_i -> images[i].

    Raises:
        ValidationError: If the number of images differs from the support size.
    """
    points = _as_points(images, "images")
    if points.shape[0] != mu.size:
        raise ValidationError(
            f"Push-forward needs {mu.size} images, got {points.shape[0]}."
        )
    image = ParticleMeasure(points, mu.weights)
    return image.merged() if merge else image


@dataclass(frozen=True, eq=False)
class _SupportField:
    measure: ParticleMeasure
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.ndim == 1 and self.measure.dimension == 1:
            values = values.reshape(-1, 1)
        values = validate_finite_array(values, type(self).__name__, ndim=2)
        if values.shape != self.measure.points.shape:
            raise ValidationError(
                f"Invalid {type(self).__name__}: expected shape {self.measure.points.shape}, "
                f"got {values.shape}."
            )
        object.__setattr__(self, "values", _freeze(values))

    def norm(self) -> float:
        """L2(measure) norm."""
        return float(
            np.sqrt(self.measure.weights @ np.einsum("ij,ij->i", self.values, self.values))
        )

    def pairing(self, other: Any) -> float:
        """Integral of the pointwise dot product against the base measure."""
        values = other.values if isinstance(other, _SupportField) else np.asarray(other)
        return float(self.measure.weights @ np.einsum("ij,ij->i", self.values, values))

    @classmethod
    def zeros(cls, measure: ParticleMeasure) -> Any:
        return cls(measure, np.zeros_like(measure.points))


class CovectorField(_SupportField):
    """One covector per support point of `measure`."""


class VelocityField(_SupportField):
    """One vector per support point of `measure`."""

    def displace(self, h: float) -> ParticleMeasure:
        """(Id + h v)#measure."""
        return pushforward(self.measure, self.measure.points + h * self.values)


@dataclass(frozen=True, eq=False)
class CotangentSample:
    """Atoms (x, q, mass) of a measure on base points times covectors."""

    points: np.ndarray
    covectors: np.ndarray
    masses: np.ndarray

    def __post_init__(self) -> None:
        points = _as_points(self.points)
        covectors = _as_points(self.covectors, "covectors")
        masses = validate_probability_vector(
            np.asarray(self.masses, dtype=float).reshape(-1),
            "cotangent masses",
            DEFAULT_TOLERANCES.weight_sum,
        )
        if not points.shape == covectors.shape or points.shape[0] != masses.shape[0]:
            raise ValidationError("Invalid cotangent sample: atom arrays have mismatched shapes.")
        object.__setattr__(self, "points", _freeze(points))
        object.__setattr__(self, "covectors", _freeze(covectors))
        object.__setattr__(self, "masses", _freeze(masses))

    @classmethod
    def from_field(cls, mu: ParticleMeasure, covectors: Any) -> "CotangentSample":
        """Deterministic sample (Id, q)#mu."""
        return cls(mu.points, covectors, mu.weights)

    @property
    def size(self) -> int:
        return int(self.masses.shape[0])

    def base_measure(self) -> ParticleMeasure:
        """Projection onto the base points, duplicates merged."""
        return ParticleMeasure(self.points, self.masses).merged()

    def second_moment(self) -> float:
        """Integral of |q|^2."""
        return float(self.masses @ np.einsum("ij,ij->i", self.covectors, self.covectors))


def barycenter(gamma: CotangentSample) -> CovectorField:
    """Mass-weighted mean covector at each distinct base point."""
    unique, inverse = _row_groups(gamma.points)
    group_mass = np.bincount(inverse, weights=gamma.masses, minlength=unique.shape[0])

    sums = np.zeros((unique.shape[0], gamma.covectors.shape[1]))
    np.add.at(sums, inverse, gamma.masses[:, None] * gamma.covectors)

    values = np.divide(
        sums, group_mass[:, None], out=np.zeros_like(sums), where=group_mass[:, None] > 0
    )
    return CovectorField(ParticleMeasure(unique, group_mass), values)


@dataclass(frozen=True, eq=False)
class GluedCoupling:
    """Three-marginal coupling with atoms (source[i], first[j], second[k], mass)."""

    source: ParticleMeasure
    first: ParticleMeasure
    second: ParticleMeasure
    i: np.ndarray
    j: np.ndarray
    k: np.ndarray
    masses: np.ndarray

    def pair_masses(self, axes: tuple[int, int]) -> dict[tuple[int, int], float]:
        """Two-dimensional marginal as a {(index, index): mass} mapping."""
        columns = {0: self.i, 1: self.j, 2: self.k}
        left, right = columns[axes[0]], columns[axes[1]]
        result: dict[tuple[int, int], float] = {}
        for a, b, m in zip(left, right, self.masses):
            result[(int(a), int(b))] = result.get((int(a), int(b)), 0.0) + float(m)
        return result

    def points(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.source.points[self.i], self.first.points[self.j], self.second.points[self.k]


def glue_plans(pi_bar: TransportPlan, pi: TransportPlan) -> GluedCoupling:
    """Glue two plans with a common source by conditional independence.

    For every source atom x_i the conditionals pi_bar(.|x_i) and pi(.|x_i) are
    multiplied, so the (1,2) marginal is pi_bar and the (1,3) marginal is pi.

    Raises:
        ValidationError: If the plans do not share the same source measure.
    """
    source = pi_bar.source
    if not (source is pi.source or source.same_as(pi.source)):
        raise ValidationError("Cannot glue plans with different source measures.")

    i_out: list[int] = []
    j_out: list[int] = []
    k_out: list[int] = []
    m_out: list[float] = []
    for i in range(source.size):
        weight = source.weights[i]
        if weight <= 0:
            continue
        first = np.nonzero(pi_bar.rows == i)[0]
        second = np.nonzero(pi.rows == i)[0]
        for a in first:
            for b in second:
                i_out.append(i)
                j_out.append(int(pi_bar.cols[a]))
                k_out.append(int(pi.cols[b]))
                m_out.append(float(pi_bar.masses[a] * pi.masses[b] / weight))

    return GluedCoupling(
        source=source,
        first=pi_bar.target,
        second=pi.target,
        i=np.asarray(i_out, dtype=np.int64),
        j=np.asarray(j_out, dtype=np.int64),
        k=np.asarray(k_out, dtype=np.int64),
        masses=np.asarray(m_out, dtype=float),
    )


def squared_distances(
    mu: ParticleMeasure,
    measures: list[ParticleMeasure],
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> np.ndarray:
    """W2^2 from mu to each measure; Dirac targets are evaluated in one batch.

    Values agree bit for bit with `wasserstein2(mu, nu)[1].cost()` on Dirac targets.
    """
    result = np.empty(len(measures))
    dirac_index = [
        k for k, nu in enumerate(measures) if nu.is_dirac and nu.dimension == mu.dimension
    ]
    if dirac_index:
        targets = np.stack([measures[k].points[0] for k in dirac_index])
        if mu.is_dirac:
            delta = targets - mu.points[0]
            result[dirac_index] = np.einsum("ij,ij->i", delta, delta)
        else:
            delta = mu.points[:, None, :] - targets[None, :, :]
            result[dirac_index] = mu.weights @ np.einsum("nkd,nkd->nk", delta, delta)
    dirac_set = set(dirac_index)
    for k, nu in enumerate(measures):
        if k not in dirac_set:
            result[k] = wasserstein2(mu, nu, tolerances)[1].cost()
    return result
