"""Tolerances and numeric defaults shared by every module."""

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    """All comparison tolerances in one record.

    Attributes:
        weight_sum: Allowed deviation of measure weights from total mass 1.
        marginal: Allowed deviation of plan marginals from their measures.
        metric: Tolerance for distance comparisons and optimality re-solves.
        probe: Tolerance for subgradient and shift-inequality probe margins.
        margin: Default tolerance for Bellman and bound margins.
        cache_quantum: Resolution of particle positions in value cache keys.
        lipschitz_slack: Relative slack when certifying declared model constants.
    """

    weight_sum: float = 1e-12
    marginal: float = 1e-10
    metric: float = 1e-9
    probe: float = 1e-8
    margin: float = 1e-3
    cache_quantum: float = 1e-9
    lipschitz_slack: float = 0.05


DEFAULT_TOLERANCES = Tolerances()

DEFAULT_STEP = 1e-2
DEFAULT_BUDGET = 10**6
DEFAULT_H_SEQUENCE = (1e-1, 1e-2, 1e-3, 1e-4)
DEFAULT_KAPPA_GRID = (0.8, 0.4, 0.2, 0.1, 0.05)
DEFAULT_PARTITION_STEPS = (5, 10, 20)
DEFAULT_EPSILON_GRID = (1e-2, 1e-3, 1e-4)
