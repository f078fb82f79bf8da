"""Hamiltonian evaluation and viscosity sub/supersolution margins for the Bellman equation."""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from wassprox.config import DEFAULT_TOLERANCES
from wassprox.dynamics_engine import ControlModel
from wassprox.measure_core import CovectorField, ParticleMeasure, second_moment_root
from wassprox.nonsmooth_kit import ValueDictionary, proximal_pair
from wassprox.utils.validators import ValidationError, validate_nonnegative

logger = logging.getLogger(__name__)

QueryPoint = tuple[float, ParticleMeasure]


@dataclass(frozen=True)
class HamiltonianResult:
    """min over U of <p, f(s, ., mu, u)>_mu + L(s, mu, u); ties go to the lowest index."""

    value: float
    argmin_index: int
    argmin_u: np.ndarray
    per_u_values: tuple[float, ...]


def hamiltonian(
    model: ControlModel, s: float, mu: ParticleMeasure, p: CovectorField
) -> HamiltonianResult:
    """Evaluate H(s, mu, p) by enumerating the control set.

    Raises:
        ValidationError: If p is not defined on the support of mu.
    """
    if p.measure.points.shape != mu.points.shape or not np.array_equal(
        p.measure.points, mu.points
    ):
        raise ValidationError("Covector field is not defined on the support of mu.")

    per_u = tuple(
        p.pairing(np.asarray(model.drift(s, mu.points, mu, u), dtype=float))
        + float(model.running_cost(s, mu, u))
        for u in model.controls
    )
    index = int(np.argmin(per_u))
    return HamiltonianResult(per_u[index], index, model.controls[index], per_u)


def c_of_D(model: ControlModel, measures: Sequence[ParticleMeasure]) -> float:
    """max over the measures of (1 + c_1^2 (1 + 2 varsigma(m))^2)^(1/2)."""
    if not measures:
        raise ValidationError("Invalid measure set: at least one measure is required.")
    return max(
        math.sqrt(1.0 + model.c_1**2 * (1.0 + 2.0 * second_moment_root(m)) ** 2)
        for m in measures
    )


@dataclass(frozen=True)
class BellmanRow:
    point_id: int
    s: float
    anchor_t: float
    anchor_distance: float
    a: float
    hamiltonian: float
    margin: float
    gated: bool


@dataclass(frozen=True)
class BellmanReport:
    """Per-point margins of one solution check; ungated points are skipped."""

    kind: str
    rows: tuple[BellmanRow, ...]
    c_of_d: float
    epsilon: float
    tol: float

    @property
    def checked(self) -> tuple[BellmanRow, ...]:
        return tuple(row for row in self.rows if row.gated)

    @property
    def skipped(self) -> int:
        return len(self.rows) - len(self.checked)

    @property
    def worst(self) -> float:
        return min((row.margin for row in self.checked), default=math.inf)

    @property
    def passed(self) -> bool:
        """True when at least one point was checked and every checked margin is >= -tol."""
        return bool(self.checked) and self.worst >= -self.tol

    def failures(self) -> list[int]:
        return [row.point_id for row in self.checked if row.margin < -self.tol]

    def csv_rows(self) -> list[list[Any]]:
        return [
            [
                row.point_id,
                row.s,
                row.anchor_t,
                row.anchor_distance,
                row.a,
                row.hamiltonian,
                row.margin,
                "gated" if row.gated else "skipped",
            ]
            for row in self.rows
        ]


BELLMAN_COLUMNS = ["point_id", "s", "anchor_t", "anchor_distance", "a", "H", "margin", "gate"]


def _solution_margins(
    kind: str,
    model: ControlModel,
    dictionary: ValueDictionary,
    test_points: Sequence[QueryPoint],
    kappa: float,
    epsilon: float,
    tol: float,
    c_d: Optional[float],
) -> BellmanReport:
    epsilon = validate_nonnegative(epsilon, "epsilon")
    if not test_points:
        raise ValidationError("Invalid test points: at least one point is required.")
    if c_d is None:
        c_d = c_of_D(model, [mu for _, mu in test_points])
    sign = "super" if kind == "subsolution" else "sub"

    rows = []
    for k, (s, mu) in enumerate(test_points):
        envelope, pair = proximal_pair(
            dictionary, s, mu, kappa, sign=sign, epsilon=epsilon, horizon=model.horizon
        )
        distance = envelope.diagnostics.anchor_distance
        if not pair.gated:
            logger.info(
                "Point %d at s=%g skipped: rho1 %.4g does not clear the gate", k, s, pair.rho1
            )
            rows.append(
                BellmanRow(k, s, pair.anchor_t, distance, pair.a, math.nan, math.nan, False)
            )
            continue

        p = pair.barycenter()
        value = hamiltonian(model, pair.anchor_t, p.measure, p).value
        total = pair.a + value
        margin = total + c_d * epsilon if kind == "subsolution" else c_d * epsilon - total
        rows.append(BellmanRow(k, s, pair.anchor_t, distance, pair.a, value, margin, True))

    report = BellmanReport(kind, tuple(rows), c_d, epsilon, tol)
    logger.info(
        "%s check: %d checked, %d skipped, worst margin %.4g",
        kind.capitalize(),
        len(report.checked),
        report.skipped,
        report.worst,
    )
    return report


def subsolution_margin(
    model: ControlModel,
    dictionary: ValueDictionary,
    test_points: Sequence[QueryPoint],
    kappa: float,
    epsilon: float = 0.0,
    tol: float = DEFAULT_TOLERANCES.margin,
    c_d: Optional[float] = None,
) -> BellmanReport:
    """Margins a + H(t, nu, b[gamma]) + C(D) epsilon for sup-envelope supergradients.

    Each pair is evaluated at its anchor (t, nu); C(D) defaults to the value
    over the test measures.
    """
    return _solution_margins(
        "subsolution", model, dictionary, test_points, kappa, epsilon, tol, c_d
    )


def supersolution_margin(
    model: ControlModel,
    dictionary: ValueDictionary,
    test_points: Sequence[QueryPoint],
    kappa: float,
    epsilon: float = 0.0,
    tol: float = DEFAULT_TOLERANCES.margin,
    c_d: Optional[float] = None,
) -> BellmanReport:
    """Margins C(D) epsilon - (a + H(t, nu, b[gamma])) for inf-envelope subgradients."""
    return _solution_margins(
        "supersolution", model, dictionary, test_points, kappa, epsilon, tol, c_d
    )
