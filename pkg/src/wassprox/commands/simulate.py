"""Implementation of the `wassprox simulate` command."""

from wassprox.dynamics_engine import (
    growth_diagnostics,
    payoff_J,
    polynomial_test_functions,
    solve_continuity,
    trajectory_rows,
    weak_form_residual,
)
from wassprox.runner import CommandOutcome, RunContext
from wassprox.scenario import build_control, build_model


def trajectory_columns(dimension: int) -> list[str]:
    return ["time", "particle_id", *[f"x_{k + 1}" for k in range(dimension)], "weight"]


def simulate(context: RunContext) -> CommandOutcome:
    """Integrate the open-loop control of the scenario and record the particle paths."""
    scenario = context.scenario
    model = build_model(scenario)
    control = build_control(scenario, model)
    step = scenario.solver.step

    trajectory = solve_continuity(
        model, scenario.s, scenario.horizon, scenario.initial_measure, control, step
    )
    context.write_csv(
        "trajectory.csv", trajectory_columns(model.dimension), trajectory_rows(trajectory)
    )

    residual = max(
        weak_form_residual(model, trajectory, control, test_fn)
        for test_fn in polynomial_test_functions(model.dimension)
    )
    growth = growth_diagnostics(trajectory, scenario.initial_measure)
    metrics = {
        "payoff": payoff_J(model, scenario.s, scenario.initial_measure, control, step),
        "weak_form_residual": residual,
        **growth.as_dict(),
    }
    return CommandOutcome(passed=growth.passed, metrics=metrics)
