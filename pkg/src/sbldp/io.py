"""Deterministic CSV and JSON writers for run bundles."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os

import numpy as np


def format_value(v) -> str:
    """Shortest round-trip text for floats; vectors join with ``;``."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    if isinstance(v, (list, tuple, np.ndarray)):
        return ";".join(format_value(x) for x in np.ravel(np.asarray(v, dtype=object)))
    return str(v)


def write_csv(path: str, columns, rows) -> str:
    """Write dict rows (or sequences) under a header; LF line endings, UTF-8."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            vals = [row.get(c) for c in columns] if isinstance(row, dict) else list(row)
            w.writerow([format_value(v) for v in vals])
    return path


def read_path_csv(path: str):
    """Read a ``t,x1,...`` path file into ``(times, states)``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:]


def sanitize(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to ``None``."""
    if isinstance(obj, dict):
        return {str(k): sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return sanitize(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(sanitize(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: str, obj) -> str:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj))
    return path


def file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


__all__ = ["format_value", "write_csv", "read_path_csv", "sanitize", "dumps", "write_json",
           "file_digest", "ensure_dir"]
