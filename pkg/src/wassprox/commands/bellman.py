"""Implementation of the `wassprox check-bellman` command."""

from wassprox.bellman_check import (
    BELLMAN_COLUMNS,
    c_of_D,
    subsolution_margin,
    supersolution_margin,
)
from wassprox.runner import CommandOutcome, RunContext
from wassprox.scenario import build_dictionary, build_model, resolve_points


def check_bellman(context: RunContext) -> CommandOutcome:
    """Subsolution and supersolution margins of the dictionary at the scenario's test points.

    Fails when either check has a margin below -tol or no gated point at all.
    """
    scenario = context.scenario
    model = build_model(scenario)
    dictionary = build_dictionary(scenario, model)
    settings = scenario.bellman
    points = resolve_points(scenario, settings.points)
    kappa = scenario.regularization.kappa
    c_d = c_of_D(model, [mu for _, mu in points])

    reports = [
        check(model, dictionary, points, kappa, settings.epsilon, settings.tol, c_d)
        for check in (subsolution_margin, supersolution_margin)
    ]
    context.write_csv(
        "bellman.csv",
        ["kind", *BELLMAN_COLUMNS],
        [[report.kind, *row] for report in reports for row in report.csv_rows()],
    )

    metrics = {"c_of_d": c_d, "kappa": kappa, "epsilon": settings.epsilon}
    for report in reports:
        metrics[f"{report.kind}_worst"] = report.worst
        metrics[f"{report.kind}_checked"] = len(report.checked)
        metrics[f"{report.kind}_skipped"] = report.skipped
        metrics[f"{report.kind}_failures"] = report.failures()
    return CommandOutcome(passed=all(report.passed for report in reports), metrics=metrics)
