"""Main CLI entry point for Wassprox."""

from pathlib import Path
from typing import Optional

import typer
from rich import print

from wassprox import __version__

app = typer.Typer(
    name="wassprox",
    help="Moreau-Yosida envelopes, proximal aiming and value bounds on particle measures",
    add_completion=False,
    no_args_is_help=True,
)

EXIT_PASSED = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

SCENARIO_OPTION = typer.Option(..., "--scenario", "-s", help="Scenario YAML file.")
OUT_OPTION = typer.Option(
    None, "--out", "-o", help="Directory for run directories (default: scenario output_dir)."
)
STEP_OPTION = typer.Option(None, "--step", help="Integrator step, overrides the scenario.")
KAPPA_OPTION = typer.Option(None, "--kappa", help="Regularization parameter kappa.")
EPSILON_OPTION = typer.Option(None, "--epsilon", help="Subgradient precision epsilon.")
ETA_OPTION = typer.Option(None, "--eta", help="Allowed excess eta of the upper bound.")
BUDGET_OPTION = typer.Option(None, "--budget", help="Largest number of searched control sequences.")
SEED_OPTION = typer.Option(None, "--seed", help="Random seed for probes.")
VERBOSE_OPTION = typer.Option(False, "--verbose", "-v", help="Show verbose output.")


def version_callback(value: bool) -> None:
    """Print the version of wassprox."""
    if value:
        print(f"Wassprox version: {__version__}")
        raise typer.Exit(0)


@app.callback(invoke_without_command=True)
def callback(
    version: bool = typer.Option(
        False,
        "--version",
        "-V",
        help="Show the version and exit.",
        callback=version_callback,
        is_eager=True,
    ),
) -> None:
    """Moreau-Yosida envelopes, proximal aiming and value bounds on particle measures."""
    pass


def execute(
    subcommand: str,
    scenario_path: Path,
    out: Optional[Path],
    verbose: bool,
    **overrides: Optional[float],
) -> None:
    """Load the scenario, run one subcommand and exit with its status code."""
    from rich.panel import Panel

    from wassprox.logging_config import configure_logging
    from wassprox.report_engine import ReportEngine
    from wassprox.runner import run
    from wassprox.scenario import apply_overrides, load_scenario
    from wassprox.utils.validators import NumericalError, ValidationError

    configure_logging(verbose)
    try:
        scenario = apply_overrides(load_scenario(scenario_path), **overrides)
        manifest = run(subcommand, scenario, out)
    except ValidationError as e:
        print(f"[red]Error: {e}[/]")
        raise typer.Exit(EXIT_USAGE) from e
    except NumericalError as e:
        print(f"[red]Numerical failure: {e}[/]")
        raise typer.Exit(EXIT_NUMERICAL) from e

    color = "green" if manifest.passed else "red"
    lines = [f"[bold]{subcommand}[/] on [cyan]{scenario.name}[/]: [{color}]{manifest.status}[/]"]
    lines += [f"[dim]{key}:[/] {value}" for key, value in manifest.metrics.items()]
    print(Panel("\n".join(lines), title="Wassprox", expand=False))
    if verbose:
        run_dir = Path(out or scenario.base_dir / scenario.output_dir) / manifest.run_name
        print(ReportEngine().artifact_tree(run_dir, manifest.artifacts))

    raise typer.Exit(EXIT_PASSED if manifest.passed else EXIT_CHECK_FAILED)


@app.command("simulate")
def simulate_command(
    scenario: Path = SCENARIO_OPTION,
    out: Optional[Path] = OUT_OPTION,
    step: Optional[float] = STEP_OPTION,
    seed: Optional[int] = SEED_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Integrate the scenario's open-loop control and write the particle paths."""
    execute("simulate", scenario, out, verbose, step=step, seed=seed)


@app.command("value")
def value_command(
    scenario: Path = SCENARIO_OPTION,
    out: Optional[Path] = OUT_OPTION,
    step: Optional[float] = STEP_OPTION,
    budget: Optional[int] = BUDGET_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Exact value search with dynamic programming and boundary checks."""
    execute("value", scenario, out, verbose, step=step, budget=budget)


@app.command("aim")
def aim_command(
    scenario: Path = SCENARIO_OPTION,
    out: Optional[Path] = OUT_OPTION,
    step: Optional[float] = STEP_OPTION,
    kappa: Optional[float] = KAPPA_OPTION,
    epsilon: Optional[float] = EPSILON_OPTION,
    eta: Optional[float] = ETA_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Run the proximal-aiming feedback and write its audit."""
    execute("aim", scenario, out, verbose, step=step, kappa=kappa, epsilon=epsilon, eta=eta)


@app.command("regularize")
def regularize_command(
    scenario: Path = SCENARIO_OPTION,
    out: Optional[Path] = OUT_OPTION,
    kappa: Optional[float] = KAPPA_OPTION,
    epsilon: Optional[float] = EPSILON_OPTION,
    seed: Optional[int] = SEED_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Envelope gaps, anchor diagnostics and a proximal subgradient check."""
    execute("regularize", scenario, out, verbose, kappa=kappa, epsilon=epsilon, seed=seed)


@app.command("check-bellman")
def check_bellman_command(
    scenario: Path = SCENARIO_OPTION,
    out: Optional[Path] = OUT_OPTION,
    kappa: Optional[float] = KAPPA_OPTION,
    epsilon: Optional[float] = typer.Option(
        None, "--epsilon", help="Precision epsilon of the viscosity margins."
    ),
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Viscosity sub- and supersolution margins of the dictionary."""
    execute("check-bellman", scenario, out, verbose, kappa=kappa, bellman_epsilon=epsilon)


@app.command("certify-upper")
def certify_upper_command(
    scenario: Path = SCENARIO_OPTION,
    out: Optional[Path] = OUT_OPTION,
    step: Optional[float] = STEP_OPTION,
    kappa: Optional[float] = KAPPA_OPTION,
    epsilon: Optional[float] = EPSILON_OPTION,
    eta: Optional[float] = ETA_OPTION,
    budget: Optional[int] = BUDGET_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Check that the aiming payoff stays within eta above the dictionary."""
    execute(
        "certify-upper",
        scenario,
        out,
        verbose,
        step=step,
        kappa=kappa,
        epsilon=epsilon,
        eta=eta,
        budget=budget,
    )


@app.command("certify-lower")
def certify_lower_command(
    scenario: Path = SCENARIO_OPTION,
    out: Optional[Path] = OUT_OPTION,
    step: Optional[float] = STEP_OPTION,
    kappa: Optional[float] = KAPPA_OPTION,
    epsilon: Optional[float] = EPSILON_OPTION,
    budget: Optional[int] = BUDGET_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Check that no searched control pays less than the dictionary value."""
    execute(
        "certify-lower",
        scenario,
        out,
        verbose,
        step=step,
        kappa=kappa,
        epsilon=epsilon,
        budget=budget,
    )


@app.command("search-complex")
def search_complex_command(
    scenario: Path = SCENARIO_OPTION,
    out: Optional[Path] = OUT_OPTION,
    step: Optional[float] = STEP_OPTION,
    eta: Optional[float] = ETA_OPTION,
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Search the parameter complex for a given eta."""
    execute("search-complex", scenario, out, verbose, step=step, eta=eta)


@app.command("report")
def report_command(
    run_dir: Path = typer.Argument(..., help="Run directory containing manifest.json."),
    verbose: bool = VERBOSE_OPTION,
) -> None:
    """Render report.md and plot-data CSVs for a finished run."""
    from wassprox.commands.report import show_report
    from wassprox.logging_config import configure_logging
    from wassprox.utils.validators import ValidationError

    configure_logging(verbose)
    try:
        show_report(run_dir, verbose)
    except ValidationError as e:
        print(f"[red]Error: {e}[/]")
        raise typer.Exit(EXIT_USAGE) from e


def main():
    app()


if __name__ == "__main__":
    main()
