"""Byte-stable text output: CSV tables and JSON documents.

Floats are written with ``repr``, the shortest decimal that parses back to
the same double, so every export round-trips exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np


def format_value(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    return str(x)


def write_csv(fh, columns, rows, comment: str | None = None) -> None:
    """Header row, then one row per record; ``comment`` goes on a leading ``#`` line."""
    if comment is not None:
        if "\n" in comment:
            raise ValueError("comment must be a single line")
        fh.write(f"# {comment}\n")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(v) for v in row])


def read_csv(path) -> dict[str, np.ndarray]:
    """Read a numeric CSV written by ``write_csv`` into column arrays."""
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        data = [[float(v) for v in row] for row in reader]
    arr = np.array(data, dtype=np.float64).reshape(len(data), len(header))
    return {name: arr[:, k] for k, name in enumerate(header)}


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        # JSON has no inf/nan; keep them as tagged strings
        return x if math.isfinite(x) else format_value(x)
    return obj


def read_comment(path) -> str | None:
    with open(path) as fh:
        first = fh.readline()
    return first[2:].rstrip("\n") if first.startswith("# ") else None


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def digest(obj) -> str:
    return hashlib.blake2b(dumps(obj).encode(), digest_size=16).hexdigest()
