"""Implementation of the `wassprox regularize` command."""

import math

import numpy as np

from wassprox.nonsmooth_kit import (
    check_prox_subgradient,
    dictionary_probes,
    envelope_gap,
    proximal_pair,
)
from wassprox.runner import CommandOutcome, RunContext
from wassprox.scenario import build_dictionary, build_model
from wassprox.utils.io import PLAN_COLUMNS, plan_rows

GAP_COLUMNS = ["kappa", "gap", "rho3", "rho1", "anchor_radius", "within_bound"]
ENVELOPE_COLUMNS = [
    "s",
    "kappa",
    "envelope",
    "anchor_t",
    "anchor_distance",
    "a",
    "rho1",
    "ekeland_on_table",
    "ekeland_runner_up",
]
PROBE_COLUMNS = ["probe_id", "margin", "status"]


def regularize(context: RunContext) -> CommandOutcome:
    """Envelope gaps over the kappa sweep, and the proximal pair at the scenario start.

    The pair is checked as a proximal subgradient at its anchor against probes at
    up to `probes` dictionary entries, with the quadratic coefficient 1 / (2 kappa^2)
    the inf-envelope guarantees. The run fails if a gap exceeds rho3 or a probe fails.
    """
    scenario = context.scenario
    model = build_model(scenario)
    dictionary = build_dictionary(scenario, model)
    settings = scenario.regularization

    gaps = []
    for kappa in settings.kappas:
        result = envelope_gap(dictionary, kappa)
        gaps.append(
            [
                kappa,
                result.gap,
                result.rho3,
                dictionary.rho1(kappa),
                dictionary.anchor_radius(kappa),
                result.within_bound,
            ]
        )
    context.write_csv("envelope_gaps.csv", GAP_COLUMNS, gaps)

    kappa = settings.kappa
    envelope, pair = proximal_pair(
        dictionary,
        scenario.s,
        scenario.initial_measure,
        kappa,
        epsilon=settings.epsilon,
        horizon=model.horizon,
    )
    diagnostics = envelope.diagnostics
    context.write_csv(
        "envelope.csv",
        ENVELOPE_COLUMNS,
        [
            [
                scenario.s,
                kappa,
                envelope.value,
                envelope.anchor_t,
                diagnostics.anchor_distance,
                pair.a,
                diagnostics.rho1,
                *diagnostics.ekeland_residuals,
            ]
        ],
    )
    context.write_csv("plan.csv", PLAN_COLUMNS, plan_rows(envelope.plan))

    rng = np.random.default_rng(scenario.seed)
    count = min(settings.probes, len(dictionary))
    indices = np.sort(rng.choice(len(dictionary), size=count, replace=False))
    probes = dictionary_probes(pair, dictionary, indices.tolist())
    report = check_prox_subgradient(
        dictionary,
        pair.anchor_t,
        pair.anchor_measure,
        pair,
        probes,
        sigma=0.5 / kappa**2,
        tolerances=dictionary.tolerances,
    )
    context.write_csv("probes.csv", PROBE_COLUMNS, report.rows())

    worst_gap = max(row[1] for row in gaps)
    metrics = {
        "envelope": envelope.value,
        "anchor_distance": diagnostics.anchor_distance,
        "rho1": diagnostics.rho1,
        "worst_envelope_gap": worst_gap,
        "worst_probe_margin": report.worst if report.margins else math.nan,
        "rejected_probes": len(report.rejected),
    }
    passed = all(row[-1] for row in gaps) and report.passed()
    return CommandOutcome(passed=passed, metrics=metrics)
