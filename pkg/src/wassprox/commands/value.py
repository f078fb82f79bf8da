"""Implementation of the `wassprox value` command."""

import math

from wassprox.config import DEFAULT_TOLERANCES
from wassprox.runner import CommandOutcome, RunContext
from wassprox.scenario import build_model
from wassprox.value_oracle import ValueOracle, ValueQuery, boundary_check, dpp_residual

# Largest dynamic programming residual accepted at the midpoint split.
DPP_TOLERANCE = 2e-2

VALUE_COLUMNS = ["s", "n_steps", "value", "exact_value", "dpp_residual", "boundary_gap"]
CONTROL_COLUMNS = ["interval", "start", "end", "control_index", "control"]


def value(context: RunContext) -> CommandOutcome:
    """Exact value search from the scenario start, with DPP and terminal-boundary checks."""
    scenario = context.scenario
    model = build_model(scenario)
    solver = scenario.solver
    oracle = ValueOracle(model, solver.step, solver.budget)
    s, mu, n = scenario.s, scenario.initial_measure, solver.n_steps

    result = oracle.value(ValueQuery(s, mu, n))
    exact = model.exact_value(s, mu) if model.exact_value is not None else math.nan

    residual = 0.0
    if n >= 2:
        theta = float(oracle.grid(s, n)[n // 2])
        residual = dpp_residual(model, s, mu, theta, n, solver.step, solver.budget, oracle).residual
    boundary = boundary_check(model, [mu], oracle)

    context.write_csv(
        "value.csv", VALUE_COLUMNS, [[s, n, result.value, exact, residual, boundary]]
    )
    breakpoints = result.control.breakpoints
    context.write_csv(
        "control.csv",
        CONTROL_COLUMNS,
        [
            [k, breakpoints[k], breakpoints[k + 1], index, model.control_label(index)]
            for k, index in enumerate(result.indices)
        ],
    )

    metrics = {
        "value": result.value,
        "exact_value": exact,
        "dpp_residual": residual,
        "boundary_gap": boundary,
        **result.stats.as_dict(),
    }
    passed = residual <= DPP_TOLERANCE and boundary <= DEFAULT_TOLERANCES.metric
    return CommandOutcome(passed=passed, metrics=metrics)
