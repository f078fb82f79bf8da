"""Implementation of the `wassprox aim` command."""

import logging
import math

from wassprox.commands.simulate import trajectory_columns
from wassprox.dynamics_engine import trajectory_rows
from wassprox.proximal_aiming import (
    AUDIT_COLUMNS,
    FeedbackStrategy,
    Partition,
    process_payoff,
    run_process,
)
from wassprox.runner import CommandOutcome, RunContext
from wassprox.scenario import build_dictionary, build_model
from wassprox.utils.validators import ValidationError

logger = logging.getLogger(__name__)


def aim(context: RunContext) -> CommandOutcome:
    """Run the proximal-aiming feedback from the scenario start.

    Passes when the payoff stays within eta of the dictionary value at the start;
    a start off the dictionary is reported without a verdict.
    """
    scenario = context.scenario
    model = build_model(scenario)
    dictionary = build_dictionary(scenario, model)
    settings = scenario.regularization
    s, mu = scenario.s, scenario.initial_measure

    strategy = FeedbackStrategy(model, dictionary, settings.kappa, settings.epsilon)
    partition = Partition.uniform(s, model.horizon, scenario.aiming.partition_steps)
    process = run_process(strategy, s, mu, partition, scenario.solver.step)

    context.write_csv("audit.csv", AUDIT_COLUMNS, process.audit_rows())
    context.write_csv(
        "trajectory.csv", trajectory_columns(model.dimension), trajectory_rows(process.trajectory)
    )

    payoff = process_payoff(model, process)
    try:
        phi = dictionary.value_at(s, mu)
    except ValidationError:
        logger.info("Start point is not a dictionary entry; no bound is checked")
        phi = math.nan

    eta = scenario.aiming.eta
    metrics = {
        "payoff": payoff,
        "dictionary_value": phi,
        "eta": eta,
        "rho1": dictionary.rho1(settings.kappa),
        "worst_hamiltonian_margin": max(r.hamiltonian_margin for r in process.audit),
        "gated_steps": sum(r.gated for r in process.audit),
    }
    passed = math.isnan(phi) or payoff <= phi + eta
    return CommandOutcome(passed=passed, metrics=metrics)
