"""Scenario files: strict YAML parsing, flag overrides and builders for models and dictionaries.

A scenario names a library model, the horizon, an initial measure and the
settings of every subcommand. Parsing is strict: unknown keys at any level are
rejected with the key and the section named.
"""

import dataclasses
import itertools
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from wassprox.config import (
    DEFAULT_BUDGET,
    DEFAULT_EPSILON_GRID,
    DEFAULT_KAPPA_GRID,
    DEFAULT_PARTITION_STEPS,
    DEFAULT_STEP,
    DEFAULT_TOLERANCES,
)
from wassprox.dynamics_engine import ControlModel, RelaxedControl
from wassprox.measure_core import ParticleMeasure
from wassprox.models import build_model as build_library_model
from wassprox.nonsmooth_kit import ValueDictionary
from wassprox.utils.io import config_hash, load_yaml, parse_measure, read_dictionary, read_measure
from wassprox.utils.validators import (
    ValidationError,
    validate_choice,
    validate_nonnegative,
    validate_positive,
    validate_unknown_keys,
)
from wassprox.value_oracle import ValueOracle, ValueQuery

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

TOP_LEVEL_KEYS = (
    "schema_version",
    "name",
    "model",
    "T",
    "s",
    "initial_measure",
    "initial_measure_file",
    "seed",
    "output_dir",
    "solver",
    "control",
    "dictionary",
    "regularization",
    "aiming",
    "bellman",
    "certify",
)
DICTIONARY_SOURCES = ("exact", "oracle", "file")


def _section(data: Any, name: str, allowed: Sequence[str]) -> dict[str, Any]:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError(f"Invalid section '{name}': expected a mapping.")
    validate_unknown_keys(data, allowed, name)
    return data


def _floats(values: Any, name: str) -> tuple[float, ...]:
    if not isinstance(values, (list, tuple)) or not values:
        raise ValidationError(f"Invalid {name}: expected a non-empty list of numbers.")
    return tuple(float(v) for v in values)


def _ints(values: Any, name: str) -> tuple[int, ...]:
    if not isinstance(values, (list, tuple)) or not values:
        raise ValidationError(f"Invalid {name}: expected a non-empty list of integers.")
    return tuple(int(v) for v in values)


@dataclass(frozen=True)
class ModelSpec:
    id: str
    params: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class SolverSettings:
    step: float = DEFAULT_STEP
    budget: int = DEFAULT_BUDGET
    n_steps: int = 10

    def __post_init__(self) -> None:
        validate_positive(self.step, "step")
        if int(self.budget) < 1:
            raise ValidationError(f"Invalid budget: '{self.budget}'. Must be at least 1.")
        if int(self.n_steps) < 1:
            raise ValidationError(f"Invalid n_steps: '{self.n_steps}'. Must be at least 1.")


@dataclass(frozen=True)
class ControlSpec:
    """Open-loop control for `simulate`: one constant mixture or one index per interval."""

    mixture: Optional[tuple[float, ...]] = None
    indices: Optional[tuple[int, ...]] = None

    def __post_init__(self) -> None:
        if self.mixture is not None and self.indices is not None:
            raise ValidationError("Invalid control: give either 'mixture' or 'indices', not both.")


@dataclass(frozen=True)
class GridSpec:
    start: float
    stop: float
    count: int

    def __post_init__(self) -> None:
        if int(self.count) < 1:
            raise ValidationError(f"Invalid grid count: '{self.count}'. Must be at least 1.")

    def values(self) -> np.ndarray:
        return np.linspace(self.start, self.stop, int(self.count))


@dataclass(frozen=True, eq=False)
class DictionarySpec:
    """How the value dictionary is obtained.

    "exact" tabulates the model's closed-form value, "oracle" the value search,
    "file" reads a dictionary YAML. The first two use the time grid times the
    translates of `template` by the shift grid (product grid per coordinate).
    """

    source: str = "exact"
    file: Optional[str] = None
    times: Optional[GridSpec] = None
    shifts: Optional[GridSpec] = None
    template: Optional[ParticleMeasure] = None
    offset: float = 0.0


@dataclass(frozen=True)
class RegularizationSettings:
    kappa: float = 0.4
    epsilon: float = 0.0
    kappas: tuple[float, ...] = (1.0, 0.5, 0.25)
    probes: int = 50


@dataclass(frozen=True)
class AimingSettings:
    partition_steps: int = 10
    eta: float = 0.2
    kappa_grid: tuple[float, ...] = DEFAULT_KAPPA_GRID
    partition_grid: tuple[int, ...] = DEFAULT_PARTITION_STEPS
    epsilon_grid: tuple[float, ...] = DEFAULT_EPSILON_GRID


@dataclass(frozen=True, eq=False)
class PointSpec:
    """Query point (s, measure) given inline or as a shift of the dictionary template."""

    s: float
    shift: Optional[tuple[float, ...]] = None
    measure: Optional[ParticleMeasure] = None

    def __post_init__(self) -> None:
        if (self.shift is None) == (self.measure is None):
            raise ValidationError("Invalid point: give exactly one of 'shift' and 'measure'.")


@dataclass(frozen=True, eq=False)
class BellmanSettings:
    points: tuple[PointSpec, ...] = ()
    epsilon: float = 0.0
    tol: float = DEFAULT_TOLERANCES.margin


@dataclass(frozen=True, eq=False)
class CertifySettings:
    points: tuple[PointSpec, ...] = ()
    value_steps: Optional[int] = None
    lower_tol: float = 1e-2


@dataclass(frozen=True, eq=False)
class Scenario:
    """Validated scenario with defaults applied."""

    model: ModelSpec
    horizon: float
    initial_measure: ParticleMeasure
    s: float = 0.0
    name: str = "scenario"
    seed: int = 0
    output_dir: str = "runs"
    solver: SolverSettings = field(default_factory=SolverSettings)
    control: ControlSpec = field(default_factory=ControlSpec)
    dictionary: Optional[DictionarySpec] = None
    regularization: RegularizationSettings = field(default_factory=RegularizationSettings)
    aiming: AimingSettings = field(default_factory=AimingSettings)
    bellman: BellmanSettings = field(default_factory=BellmanSettings)
    certify: CertifySettings = field(default_factory=CertifySettings)
    path: Optional[Path] = None

    def __post_init__(self) -> None:
        validate_positive(self.horizon, "T")
        if not 0.0 <= self.s < self.horizon:
            raise ValidationError(f"Invalid s: {self.s} must lie in [0, T) with T = {self.horizon}.")

    @property
    def dimension(self) -> int:
        return self.initial_measure.dimension

    @property
    def base_dir(self) -> Path:
        return self.path.parent if self.path is not None else Path.cwd()

    def to_dict(self) -> dict[str, Any]:
        """Fully explicit mapping; parsing it again yields an equal scenario."""
        data: dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "model": {"id": self.model.id, "params": dict(self.model.params)},
            "T": self.horizon,
            "s": self.s,
            "initial_measure": self.initial_measure.to_dict(),
            "seed": self.seed,
            "output_dir": self.output_dir,
            "solver": dataclasses.asdict(self.solver),
            "regularization": {
                "kappa": self.regularization.kappa,
                "epsilon": self.regularization.epsilon,
                "kappas": list(self.regularization.kappas),
                "probes": self.regularization.probes,
            },
            "aiming": {
                "partition_steps": self.aiming.partition_steps,
                "eta": self.aiming.eta,
                "kappa_grid": list(self.aiming.kappa_grid),
                "partition_grid": list(self.aiming.partition_grid),
                "epsilon_grid": list(self.aiming.epsilon_grid),
            },
            "bellman": {
                "points": [_point_dict(p) for p in self.bellman.points],
                "epsilon": self.bellman.epsilon,
                "tol": self.bellman.tol,
            },
            "certify": {
                "points": [_point_dict(p) for p in self.certify.points],
                "value_steps": self.certify.value_steps,
                "lower_tol": self.certify.lower_tol,
            },
        }
        control: dict[str, Any] = {}
        if self.control.mixture is not None:
            control["mixture"] = list(self.control.mixture)
        if self.control.indices is not None:
            control["indices"] = list(self.control.indices)
        if control:
            data["control"] = control
        if self.dictionary is not None:
            data["dictionary"] = _dictionary_dict(self.dictionary)
        return data

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def _point_dict(point: PointSpec) -> dict[str, Any]:
    if point.shift is not None:
        return {"s": point.s, "shift": list(point.shift)}
    return {"s": point.s, "measure": point.measure.to_dict()}


def _grid_dict(grid: GridSpec) -> dict[str, Any]:
    return {"start": grid.start, "stop": grid.stop, "count": grid.count}


def _dictionary_dict(spec: DictionarySpec) -> dict[str, Any]:
    data: dict[str, Any] = {"source": spec.source, "offset": spec.offset}
    if spec.file is not None:
        data["file"] = spec.file
    if spec.times is not None:
        data["times"] = _grid_dict(spec.times)
    if spec.shifts is not None:
        data["shifts"] = _grid_dict(spec.shifts)
    if spec.template is not None:
        data["template"] = spec.template.to_dict()
    return data


def _parse_grid(data: Any, name: str) -> GridSpec:
    section = _section(data, name, ("start", "stop", "count"))
    for key in ("start", "stop", "count"):
        if key not in section:
            raise ValidationError(f"Invalid {name}: missing field '{key}'.")
    return GridSpec(float(section["start"]), float(section["stop"]), int(section["count"]))


def _parse_points(data: Any, name: str) -> tuple[PointSpec, ...]:
    if data is None:
        return ()
    if not isinstance(data, list):
        raise ValidationError(f"Invalid {name}: expected a list of points.")
    points = []
    for k, item in enumerate(data):
        section = _section(item, f"{name}[{k}]", ("s", "shift", "measure"))
        if "s" not in section:
            raise ValidationError(f"Invalid {name}[{k}]: missing field 's'.")
        shift = section.get("shift")
        if shift is not None and not isinstance(shift, (list, tuple)):
            shift = [shift]
        measure = section.get("measure")
        points.append(
            PointSpec(
                s=float(section["s"]),
                shift=_floats(shift, f"{name}[{k}].shift") if shift is not None else None,
                measure=parse_measure(measure, f"{name}[{k}].measure") if measure is not None else None,
            )
        )
    return tuple(points)


def _parse_dictionary(data: Any) -> DictionarySpec:
    section = _section(data, "dictionary", ("source", "file", "times", "shifts", "template", "offset"))
    source = validate_choice(section.get("source", "exact"), DICTIONARY_SOURCES, "dictionary source")
    if source == "file" and "file" not in section:
        raise ValidationError("Invalid section 'dictionary': source 'file' needs a 'file' field.")
    if source != "file":
        for key in ("times", "shifts"):
            if key not in section:
                raise ValidationError(
                    f"Invalid section 'dictionary': source '{source}' needs a '{key}' grid."
                )
    return DictionarySpec(
        source=source,
        file=section.get("file"),
        times=_parse_grid(section["times"], "dictionary.times") if "times" in section else None,
        shifts=_parse_grid(section["shifts"], "dictionary.shifts") if "shifts" in section else None,
        template=(
            parse_measure(section["template"], "dictionary.template")
            if "template" in section
            else None
        ),
        offset=float(section.get("offset", 0.0)),
    )


def parse_scenario(data: Any, path: Optional[Path] = None) -> Scenario:
    """Validate a scenario mapping.

    Raises:
        ValidationError: On unknown keys, missing fields or invalid values.
    """
    if not isinstance(data, dict):
        raise ValidationError("Invalid scenario: expected a mapping at the top level.")
    validate_unknown_keys(data, TOP_LEVEL_KEYS, "scenario")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(
            f"Invalid schema_version: '{data.get('schema_version')}'. "
            f"Valid options are: {SCHEMA_VERSION}"
        )
    for key in ("model", "T"):
        if key not in data:
            raise ValidationError(f"Invalid scenario: missing field '{key}'.")
    if ("initial_measure" in data) == ("initial_measure_file" in data):
        raise ValidationError(
            "Invalid scenario: missing field 'initial_measure' "
            "(give exactly one of 'initial_measure' and 'initial_measure_file')."
        )

    base = path.parent if path is not None else Path.cwd()
    if "initial_measure" in data:
        initial = parse_measure(data["initial_measure"], "initial_measure")
    else:
        initial = read_measure(base / data["initial_measure_file"])

    model = _section(data["model"], "model", ("id", "params"))
    if "id" not in model:
        raise ValidationError("Invalid section 'model': missing field 'id'.")
    params = _section(model.get("params"), "model.params", ("dimension", "strength", "effort"))

    solver = _section(data.get("solver"), "solver", ("step", "budget", "n_steps"))
    control = _section(data.get("control"), "control", ("mixture", "indices"))
    regularization = _section(
        data.get("regularization"), "regularization", ("kappa", "epsilon", "kappas", "probes")
    )
    aiming = _section(
        data.get("aiming"),
        "aiming",
        ("partition_steps", "eta", "kappa_grid", "partition_grid", "epsilon_grid"),
    )
    bellman = _section(data.get("bellman"), "bellman", ("points", "epsilon", "tol"))
    certify = _section(data.get("certify"), "certify", ("points", "value_steps", "lower_tol"))

    defaults_r, defaults_a = RegularizationSettings(), AimingSettings()
    value_steps = certify.get("value_steps")
    return Scenario(
        model=ModelSpec(str(model["id"]), dict(params)),
        horizon=float(data["T"]),
        initial_measure=initial,
        s=float(data.get("s", 0.0)),
        name=str(data.get("name", path.stem if path is not None else "scenario")),
        seed=int(data.get("seed", 0)),
        output_dir=str(data.get("output_dir", "runs")),
        solver=SolverSettings(
            step=float(solver.get("step", DEFAULT_STEP)),
            budget=int(solver.get("budget", DEFAULT_BUDGET)),
            n_steps=int(solver.get("n_steps", 10)),
        ),
        control=ControlSpec(
            mixture=_floats(control["mixture"], "control.mixture") if "mixture" in control else None,
            indices=_ints(control["indices"], "control.indices") if "indices" in control else None,
        ),
        dictionary=_parse_dictionary(data["dictionary"]) if "dictionary" in data else None,
        regularization=RegularizationSettings(
            kappa=validate_positive(regularization.get("kappa", defaults_r.kappa), "kappa"),
            epsilon=validate_nonnegative(
                regularization.get("epsilon", defaults_r.epsilon), "epsilon"
            ),
            kappas=_floats(regularization.get("kappas", defaults_r.kappas), "regularization.kappas"),
            probes=int(regularization.get("probes", defaults_r.probes)),
        ),
        aiming=AimingSettings(
            partition_steps=int(aiming.get("partition_steps", defaults_a.partition_steps)),
            eta=validate_nonnegative(aiming.get("eta", defaults_a.eta), "eta"),
            kappa_grid=_floats(aiming.get("kappa_grid", defaults_a.kappa_grid), "aiming.kappa_grid"),
            partition_grid=_ints(
                aiming.get("partition_grid", defaults_a.partition_grid), "aiming.partition_grid"
            ),
            epsilon_grid=_floats(
                aiming.get("epsilon_grid", defaults_a.epsilon_grid), "aiming.epsilon_grid"
            ),
        ),
        bellman=BellmanSettings(
            points=_parse_points(bellman.get("points"), "bellman.points"),
            epsilon=validate_nonnegative(bellman.get("epsilon", 0.0), "epsilon"),
            tol=validate_nonnegative(bellman.get("tol", DEFAULT_TOLERANCES.margin), "tol"),
        ),
        certify=CertifySettings(
            points=_parse_points(certify.get("points"), "certify.points"),
            value_steps=int(value_steps) if value_steps is not None else None,
            lower_tol=validate_nonnegative(certify.get("lower_tol", 1e-2), "lower_tol"),
        ),
        path=path,
    )


def load_scenario(path: Any) -> Scenario:
    """Read and validate a scenario YAML file."""
    source = Path(path)
    return parse_scenario(load_yaml(source), source)


def apply_overrides(scenario: Scenario, **overrides: Any) -> Scenario:
    """Replace scenario values by the command-line flags that were given.

    Recognized keys: step, budget, seed, kappa, epsilon, eta and bellman_epsilon.
    None means "not given".
    """
    given = {key: value for key, value in overrides.items() if value is not None}
    unknown = set(given) - {"step", "budget", "seed", "kappa", "epsilon", "eta", "bellman_epsilon"}
    if unknown:
        raise ValidationError(f"Unknown override '{sorted(unknown)[0]}'.")

    solver = dataclasses.replace(
        scenario.solver,
        **{key: given[key] for key in ("step", "budget") if key in given},
    )
    regularization = dataclasses.replace(
        scenario.regularization,
        **{key: given[key] for key in ("kappa", "epsilon") if key in given},
    )
    aiming = scenario.aiming
    if "eta" in given:
        aiming = dataclasses.replace(aiming, eta=validate_nonnegative(given["eta"], "eta"))
    if "kappa" in given:
        validate_positive(given["kappa"], "kappa")
    if "epsilon" in given:
        validate_nonnegative(given["epsilon"], "epsilon")
    bellman = scenario.bellman
    if "bellman_epsilon" in given:
        bellman = dataclasses.replace(
            bellman, epsilon=validate_nonnegative(given["bellman_epsilon"], "epsilon")
        )
    return dataclasses.replace(
        scenario,
        solver=solver,
        regularization=regularization,
        aiming=aiming,
        bellman=bellman,
        seed=int(given.get("seed", scenario.seed)),
    )


def build_model(scenario: Scenario) -> ControlModel:
    params = dict(scenario.model.params)
    params.setdefault("dimension", scenario.dimension)
    model = build_library_model(scenario.model.id, horizon=scenario.horizon, **params)
    if model.dimension != scenario.dimension:
        raise ValidationError(
            f"Model dimension {model.dimension} does not match the initial measure "
            f"dimension {scenario.dimension}."
        )
    return model


def build_control(scenario: Scenario, model: ControlModel) -> RelaxedControl:
    """Open-loop control of `simulate` on [s, T]; the resting control by default."""
    spec = scenario.control
    if spec.mixture is not None:
        if len(spec.mixture) != model.control_count:
            raise ValidationError(
                f"Invalid control mixture: {model.control_count} weights expected, "
                f"got {len(spec.mixture)}."
            )
        return RelaxedControl.constant(scenario.s, scenario.horizon, spec.mixture)
    indices = spec.indices or (0,) * scenario.solver.n_steps
    if min(indices) < 0 or max(indices) >= model.control_count:
        raise ValidationError(
            f"Invalid control indices: must lie in [0, {model.control_count - 1}]."
        )
    grid = np.linspace(scenario.s, scenario.horizon, len(indices) + 1)
    return RelaxedControl.pure(grid, indices, model.control_count)


def dictionary_template(scenario: Scenario) -> ParticleMeasure:
    spec = scenario.dictionary
    if spec is not None and spec.template is not None:
        return spec.template
    return ParticleMeasure.dirac(np.zeros(scenario.dimension))


def _shift_grid(spec: DictionarySpec, dimension: int) -> list[np.ndarray]:
    axis = spec.shifts.values()
    return [np.array(c, dtype=float) for c in itertools.product(axis, repeat=dimension)]


def build_dictionary(
    scenario: Scenario, model: ControlModel, oracle: Optional[ValueOracle] = None
) -> ValueDictionary:
    """Value dictionary described by the scenario's `dictionary` section.

    Raises:
        ValidationError: If there is no such section or the source is unusable.
    """
    spec = scenario.dictionary
    if spec is None:
        raise ValidationError("Invalid scenario: this subcommand needs a 'dictionary' section.")

    if spec.source == "file":
        dictionary = read_dictionary(scenario.base_dir / spec.file)
    else:
        if spec.source == "exact":
            if model.exact_value is None:
                raise ValidationError(
                    f"Model '{model.name}' has no closed-form value; use source 'oracle' or 'file'."
                )
            fn = model.exact_value
        else:
            oracle = oracle or ValueOracle(model, scenario.solver.step, scenario.solver.budget)
            n_steps = scenario.solver.n_steps

            def fn(t: float, m: ParticleMeasure) -> float:
                return oracle.value(ValueQuery(t, m, n_steps)).value

        dictionary = ValueDictionary.translate_grid(
            fn,
            spec.times.values(),
            dictionary_template(scenario),
            _shift_grid(spec, scenario.dimension),
        )

    if spec.offset:
        dictionary = dictionary.shifted(spec.offset, horizon=model.horizon)
    logger.info("Built %r from source '%s'", dictionary, spec.source)
    return dictionary


def resolve_points(
    scenario: Scenario, points: Sequence[PointSpec]
) -> list[tuple[float, ParticleMeasure]]:
    """(s, measure) pairs of point specs; an empty list means the scenario's own start."""
    if not points:
        return [(scenario.s, scenario.initial_measure)]
    template = dictionary_template(scenario)
    return [
        (p.s, p.measure if p.measure is not None else template.translate(p.shift))
        for p in points
    ]
