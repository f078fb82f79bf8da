"""Implementation of the `certify-upper`, `certify-lower` and `search-complex` commands."""

import logging

from wassprox.proximal_aiming import (
    AUDIT_COLUMNS,
    BOUND_COLUMNS,
    BoundReport,
    lower_bound_check,
    search_parameter_complex,
    upper_bound_check,
)
from wassprox.runner import CommandOutcome, RunContext
from wassprox.scenario import build_dictionary, build_model, resolve_points
from wassprox.value_oracle import ValueOracle

logger = logging.getLogger(__name__)


def _write_report(context: RunContext, report: BoundReport) -> None:
    context.write_csv("bounds.csv", BOUND_COLUMNS, report.csv_rows())
    context.write_csv(
        "audit.csv",
        ["scenario_id", *AUDIT_COLUMNS],
        [
            [k, *record.as_row()]
            for k, records in enumerate(report.audits)
            for record in records
        ],
    )


def certify_upper(context: RunContext) -> CommandOutcome:
    """J of the aiming feedback and Val stay within eta above the dictionary."""
    scenario = context.scenario
    model = build_model(scenario)
    dictionary = build_dictionary(scenario, model)
    solver = scenario.solver
    oracle = ValueOracle(model, solver.step, solver.budget)

    report = upper_bound_check(
        model,
        dictionary,
        resolve_points(scenario, scenario.certify.points),
        eta=scenario.aiming.eta,
        kappa=scenario.regularization.kappa,
        partition_steps=scenario.aiming.partition_steps,
        value_steps=scenario.certify.value_steps,
        epsilon=scenario.regularization.epsilon,
        step=solver.step,
        oracle=oracle,
    )
    _write_report(context, report)
    metrics = {
        "worst_margin": report.worst,
        "eta": scenario.aiming.eta,
        "kappa": scenario.regularization.kappa,
        "worst_hamiltonian_margin": max(r.worst_hamiltonian_margin for r in report.rows),
    }
    return CommandOutcome(passed=report.passed, metrics=metrics)


def certify_lower(context: RunContext) -> CommandOutcome:
    """Every searched control pays at least the dictionary value, up to lower_tol."""
    scenario = context.scenario
    model = build_model(scenario)
    dictionary = build_dictionary(scenario, model)
    solver = scenario.solver
    oracle = ValueOracle(model, solver.step, solver.budget)

    report = lower_bound_check(
        model,
        dictionary,
        resolve_points(scenario, scenario.certify.points),
        n_steps=scenario.certify.value_steps or solver.n_steps,
        kappa=scenario.regularization.kappa,
        epsilon=scenario.regularization.epsilon,
        step=solver.step,
        oracle=oracle,
        tol=scenario.certify.lower_tol,
    )
    _write_report(context, report)
    metrics = {
        "worst_margin": report.worst,
        "tol": scenario.certify.lower_tol,
        "cone_members": sum(report.cone_members),
        "cone_checks": len(report.cone_members),
        "worst_hamiltonian_margin": min(r.worst_hamiltonian_margin for r in report.rows),
    }
    return CommandOutcome(passed=report.passed, metrics=metrics)


def search_complex(context: RunContext) -> CommandOutcome:
    """Search (kappa, epsilon, alpha) for which the aiming feedback meets the eta bound.

    An exhausted search raises NumericalError and leaves no manifest.
    """
    scenario = context.scenario
    model = build_model(scenario)
    dictionary = build_dictionary(scenario, model)
    settings = scenario.aiming

    result = search_parameter_complex(
        model,
        dictionary,
        resolve_points(scenario, scenario.certify.points),
        eta=settings.eta,
        kappa_grid=settings.kappa_grid,
        partition_steps=settings.partition_grid,
        epsilon_grid=settings.epsilon_grid,
        step=scenario.solver.step,
    )
    context.write_csv(
        "attempts.csv", ["kappa", "partition_steps", "worst_margin"], result.attempts
    )
    complex_ = result.complex.as_dict()
    context.write_json("complex.json", {**complex_, "partition_steps": result.partition_steps})
    logger.info("Parameter complex found: %s", complex_)
    return CommandOutcome(
        passed=True,
        metrics={**complex_, "partition_steps": result.partition_steps, "margins": list(result.margins)},
    )
