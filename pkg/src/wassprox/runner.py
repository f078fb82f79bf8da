"""Run directories, manifests and plot-data emission.

Every subcommand run gets its own directory `<out>/<UTC timestamp>-<hash8>-<subcommand>`.
Artifacts are written atomically as they are produced; `manifest.json` is
written last, so a directory without a manifest is an interrupted run.
"""

import json
import logging
import time
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Optional

from wassprox import __version__
from wassprox.scenario import Scenario
from wassprox.utils.io import (
    atomic_write_text,
    canonical_json,
    config_hash,
    read_csv,
    write_csv,
)
from wassprox.utils.validators import ValidationError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
PLOT_COLUMNS = ["series", "x", "y"]


@dataclass
class RunManifest:
    run_name: str
    subcommand: str
    status: str
    scenario_hash: str
    config: dict[str, Any]
    version: str
    started: str
    wall_clock_seconds: float
    artifacts: list[str]
    metrics: dict[str, Any]

    @property
    def passed(self) -> bool:
        return self.status == "passed"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class CommandOutcome:
    """What a subcommand reports back: pass/fail and its summary metrics."""

    passed: bool
    metrics: dict[str, Any] = field(default_factory=dict)


class RunContext:
    """Artifact writer bound to one run directory."""

    def __init__(self, subcommand: str, scenario: Scenario, out: Path) -> None:
        self.subcommand = subcommand
        self.scenario = scenario
        self.config = scenario.to_dict()
        self.scenario_hash = config_hash(self.config)
        now = datetime.now(timezone.utc)
        self.started = now.isoformat()
        self._t0 = time.perf_counter()
        stamp = now.strftime("%Y%m%dT%H%M%S%fZ")
        self.run_dir = Path(out) / f"{stamp}-{self.scenario_hash[:8]}-{subcommand}"
        self.run_dir.mkdir(parents=True, exist_ok=False)
        self.artifacts: list[str] = []

    def _record(self, name: str) -> Path:
        if name not in self.artifacts:
            self.artifacts.append(name)
        return self.run_dir / name

    def write_csv(self, name: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        return write_csv(self._record(name), columns, rows)

    def write_text(self, name: str, content: str) -> Path:
        return atomic_write_text(self._record(name), content)

    def write_json(self, name: str, data: Any) -> Path:
        return self.write_text(name, json.dumps(data, indent=2, sort_keys=True) + "\n")

    def finish(self, outcome: CommandOutcome) -> RunManifest:
        manifest = RunManifest(
            run_name=self.run_dir.name,
            subcommand=self.subcommand,
            status="passed" if outcome.passed else "failed",
            scenario_hash=self.scenario_hash,
            config=self.config,
            version=__version__,
            started=self.started,
            wall_clock_seconds=time.perf_counter() - self._t0,
            artifacts=list(self.artifacts),
            metrics=outcome.metrics,
        )
        atomic_write_text(
            self.run_dir / MANIFEST_NAME,
            json.dumps(manifest.to_dict(), indent=2, sort_keys=True, default=str) + "\n",
        )
        return manifest


Command = Callable[[RunContext], CommandOutcome]


def command_table() -> dict[str, Command]:
    from wassprox.commands.aim import aim
    from wassprox.commands.bellman import check_bellman
    from wassprox.commands.certify import certify_lower, certify_upper, search_complex
    from wassprox.commands.regularize import regularize
    from wassprox.commands.simulate import simulate
    from wassprox.commands.value import value

    return {
        "simulate": simulate,
        "value": value,
        "aim": aim,
        "regularize": regularize,
        "check-bellman": check_bellman,
        "certify-upper": certify_upper,
        "certify-lower": certify_lower,
        "search-complex": search_complex,
    }


def run(subcommand: str, scenario: Scenario, out: Optional[Path] = None) -> RunManifest:
    """Execute one subcommand in a fresh run directory and write its manifest.

    Exceptions from the subcommand propagate and leave no manifest behind.
    """
    commands = command_table()
    if subcommand not in commands:
        raise ValidationError(
            f"Invalid subcommand: '{subcommand}'. Valid options are: {', '.join(sorted(commands))}"
        )
    target = Path(out) if out is not None else scenario.base_dir / scenario.output_dir
    context = RunContext(subcommand, scenario, target)
    logger.info("Run %s started in %s", subcommand, context.run_dir)
    outcome = commands[subcommand](context)
    manifest = context.finish(outcome)
    logger.info("Run %s %s", subcommand, manifest.status)
    return manifest


def load_manifest(run_dir: Path) -> RunManifest:
    """Read and verify a run manifest.

    Raises:
        ValidationError: If the manifest is missing, an artifact is missing or the
            config hash does not match the stored configuration.
    """
    path = Path(run_dir) / MANIFEST_NAME
    if not path.is_file():
        raise ValidationError(f"No manifest in '{run_dir}': the run is missing or incomplete.")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        manifest = RunManifest(**data)
    except (json.JSONDecodeError, TypeError) as e:
        raise ValidationError(f"Invalid manifest in '{run_dir}': {e}") from e

    missing = [name for name in manifest.artifacts if not (Path(run_dir) / name).is_file()]
    if missing:
        raise ValidationError(f"Missing artifact in '{run_dir}': {missing[0]}")
    if config_hash(manifest.config) != manifest.scenario_hash:
        raise ValidationError(
            f"Manifest hash mismatch in '{run_dir}': stored config hashes to "
            f"{config_hash(manifest.config)[:8]}, manifest says {manifest.scenario_hash[:8]}."
        )
    return manifest


def _series(
    run_dir: Path, name: str, series: str, x: str, ys: Sequence[str]
) -> list[list[Any]]:
    """Long-format (series, x, y) rows from a CSV artifact, one series per y column."""
    header, rows = read_csv(run_dir / name)
    try:
        si = header.index(series) if series else None
        xi = header.index(x)
        yis = [header.index(y) for y in ys]
    except ValueError as e:
        raise ValidationError(f"Artifact '{name}' lacks an expected column: {e}") from e
    result = []
    for row in rows:
        for y, yi in zip(ys, yis):
            label = y if si is None else f"{row[si]}" if len(ys) == 1 else f"{row[si]}:{y}"
            result.append([label, row[xi], row[yi]])
    return result


PLOT_SOURCES: dict[str, tuple[str, str, str, tuple[str, ...]]] = {
    "trajectory.csv": ("plot_trajectory.csv", "particle_id", "time", ("x_1",)),
    "audit.csv": ("plot_audit.csv", "", "s_i", ("hamiltonian_margin", "a_i")),
    "bounds.csv": ("plot_margins.csv", "", "scenario_id", ("feedback_margin", "value_margin")),
    "bellman.csv": ("plot_bellman.csv", "kind", "point_id", ("margin",)),
    "envelope_gaps.csv": ("plot_envelope_gaps.csv", "", "kappa", ("gap", "rho3")),
}


def emit_plot_data(run_dir: Path) -> list[str]:
    """Write long-format (series, x, y) CSVs for every plottable artifact of a run.

    Returns:
        Names of the plot files written.

    Raises:
        ValidationError: If the manifest or one of its artifacts is missing.
    """
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    written = []
    for artifact in manifest.artifacts:
        if artifact not in PLOT_SOURCES:
            continue
        target, series, x, ys = PLOT_SOURCES[artifact]
        rows = _series(run_dir, artifact, series, x, ys)
        # Raw strings keep the artifact's 17-digit values untouched.
        write_csv(run_dir / target, PLOT_COLUMNS, rows)
        written.append(target)
    return written


def config_items(config: dict[str, Any], prefix: str = "") -> list[tuple[str, str]]:
    """Flattened (dotted key, compact JSON value) pairs for report tables."""
    items: list[tuple[str, str]] = []
    for key in sorted(config):
        value = config[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict) and value and key != "initial_measure":
            items.extend(config_items(value, f"{name}."))
        else:
            text = canonical_json(value)
            items.append((name, text if len(text) <= 80 else text[:77] + "..."))
    return items
