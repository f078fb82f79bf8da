"""Implementation of the `wassprox report` command."""

from pathlib import Path
from typing import Optional

from rich import print
from rich.panel import Panel

from wassprox.report_engine import ReportEngine
from wassprox.runner import config_items, emit_plot_data, load_manifest

REPORT_NAME = "report.md"


def render_report(run_dir: Path, engine: Optional[ReportEngine] = None) -> Path:
    """Emit plot data for a finished run and render its markdown report.

    Raises:
        ValidationError: If the manifest or one of its artifacts is missing.
    """
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    plot_files = emit_plot_data(run_dir)
    context = {
        "manifest": manifest,
        "run_name": run_dir.name,
        "config_items": config_items(manifest.config),
        "metric_items": sorted(manifest.metrics.items()),
        "plot_files": plot_files,
    }
    return (engine or ReportEngine()).render_file(
        "report.md.j2", context, run_dir / REPORT_NAME
    )


def show_report(run_dir: Path, verbose: bool = False) -> Path:
    engine = ReportEngine()
    path = render_report(run_dir, engine)
    manifest = load_manifest(run_dir)
    print(
        Panel(
            f"[bold]Report for[/] [cyan]{manifest.subcommand}[/] run\n"
            f"[dim]Status:[/] {manifest.status}\n"
            f"[dim]Written to:[/] {path}",
            title="Wassprox",
            expand=False,
        )
    )
    if verbose:
        print(engine.artifact_tree(Path(run_dir), manifest.artifacts))
    return path
