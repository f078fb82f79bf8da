"""File formats: measure and dictionary YAML, CSV tables, atomic writes and config hashing."""

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any, Union

import numpy as np
import yaml

from wassprox.measure_core import ParticleMeasure, TransportPlan
from wassprox.nonsmooth_kit import ValueDictionary
from wassprox.utils.validators import ValidationError, validate_unknown_keys

PathLike = Union[str, Path]


def format_number(value: Any) -> str:
    """17 significant digits for floats, so every stored value parses back bit-exactly."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        number = float(value)
        if math.isnan(number):
            return "nan"
        if math.isinf(number):
            return "inf" if number > 0 else "-inf"
        return f"{number:.17g}"
    return str(value)


def atomic_write_text(path: PathLike, content: str) -> Path:
    """Write to a temporary file in the target directory, then rename over the target."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(content)
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return target


def csv_text(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_number(value) for value in row])
    return buffer.getvalue()


def write_csv(path: PathLike, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    return atomic_write_text(path, csv_text(columns, rows))


def read_csv(path: PathLike) -> tuple[list[str], list[list[str]]]:
    """Header and raw string rows of a CSV file."""
    with Path(path).open(encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration as e:
            raise ValidationError(f"Invalid CSV file '{path}': it is empty.") from e
        return header, [row for row in reader]


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(data: Any) -> str:
    """SHA-256 hex digest of the canonical JSON form of a configuration."""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def load_yaml(path: PathLike) -> Any:
    """Parse a YAML file, reporting the line of a syntax error.

    Raises:
        ValidationError: If the file is missing or not valid YAML.
    """
    source = Path(path)
    if not source.is_file():
        raise ValidationError(f"Invalid file: '{source}' does not exist.")
    try:
        return yaml.safe_load(source.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ValidationError(f"Invalid YAML in '{source}'{where}: {e}") from e


def dump_yaml(data: Any) -> str:
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None)


MEASURE_KEYS = ("dimension", "points", "weights")


def parse_measure(data: Any, section: str = "measure") -> ParticleMeasure:
    if not isinstance(data, dict):
        raise ValidationError(f"Invalid {section}: expected a mapping with {', '.join(MEASURE_KEYS)}.")
    validate_unknown_keys(data, MEASURE_KEYS, section)
    return ParticleMeasure.from_dict(data)


def read_measure(path: PathLike) -> ParticleMeasure:
    return parse_measure(load_yaml(path), f"measure file '{path}'")


def write_measure(path: PathLike, measure: ParticleMeasure) -> Path:
    return atomic_write_text(path, dump_yaml(measure.to_dict()))


DICTIONARY_ENTRY_KEYS = ("t", "measure", "measure_file", "value")


def read_dictionary(path: PathLike, **kwargs: Any) -> ValueDictionary:
    """Load `entries: [{t, measure | measure_file, value}]`; measure files resolve next to it."""
    source = Path(path)
    data = load_yaml(source)
    if not isinstance(data, dict) or "entries" not in data:
        raise ValidationError(f"Invalid dictionary file '{source}': missing field 'entries'.")
    validate_unknown_keys(data, ("entries", "c0"), "dictionary")

    entries = []
    for k, item in enumerate(data["entries"] or []):
        section = f"dictionary entry {k}"
        if not isinstance(item, dict):
            raise ValidationError(f"Invalid {section}: expected a mapping.")
        validate_unknown_keys(item, DICTIONARY_ENTRY_KEYS, section)
        for key in ("t", "value"):
            if key not in item:
                raise ValidationError(f"Invalid {section}: missing field '{key}'.")
        if ("measure" in item) == ("measure_file" in item):
            raise ValidationError(
                f"Invalid {section}: give exactly one of 'measure' and 'measure_file'."
            )
        if "measure" in item:
            measure = parse_measure(item["measure"], section)
        else:
            measure = read_measure(source.parent / item["measure_file"])
        entries.append((float(item["t"]), measure, float(item["value"])))
    return ValueDictionary(entries, c0=data.get("c0"), **kwargs)


def write_dictionary(path: PathLike, dictionary: ValueDictionary) -> Path:
    data = {
        "c0": dictionary.c0,
        "entries": [
            {"t": entry.t, "measure": entry.measure.to_dict(), "value": entry.value}
            for entry in dictionary.entries
        ],
    }
    return atomic_write_text(path, dump_yaml(data))


PLAN_COLUMNS = ["i", "j", "mass"]


def plan_rows(plan: TransportPlan) -> list[list[Any]]:
    return [[i, j, m] for i, j, m in plan.entries]
