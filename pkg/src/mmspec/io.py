"""Deterministic file output: JSON and CSV stamped with the run configuration.

Every file carries the hash of the configuration that produced it together
with the tolerance set, so two runs with equal configuration write identical
bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .energy import energy_from_dict
from .errors import ValidationError
from .space import validate_space


def _plain(x: Any) -> Any:
    # JSON has no inf/nan: encode them as strings
    if isinstance(x, Mapping):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return x


def dumps(payload: Any) -> str:
    return json.dumps(_plain(payload), sort_keys=True, indent=2) + "\n"


def config_hash(config: Mapping) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON encoding."""
    return hashlib.sha256(json.dumps(_plain(config), sort_keys=True).encode()).hexdigest()[:16]


def stamp(config: Mapping, tolerances: Mapping) -> dict:
    return {"config_hash": config_hash(config), "tolerances": _plain(dict(tolerances))}


def write_json(path: Path, payload: Mapping, config: Mapping, tolerances: Mapping) -> Path:
    body = dict(payload)
    body["run"] = stamp(config, tolerances)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(body))
    return path


def _cell(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence], config: Mapping, tolerances: Mapping) -> str:
    """CSV with two ``#`` comment lines carrying the config hash and tolerances."""
    buf = io.StringIO()
    s = stamp(config, tolerances)
    buf.write(f"# config_hash={s['config_hash']}\n")
    buf.write("# tolerances=" + json.dumps(s["tolerances"], sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(x) for x in r])
    return buf.getvalue()


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence], config: Mapping, tolerances: Mapping) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(header, rows, config, tolerances))
    return path


def read_csv(path: Path) -> list:
    """Rows of a stamped CSV as dictionaries (comment lines skipped)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def load_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc.msg})") from exc


def load_space(path: Path):
    return validate_space(load_json(path))


def load_energy(space, path: Path):
    return energy_from_dict(space, load_json(path))
