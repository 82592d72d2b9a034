"""CSV reading and writing with the versioned header comment."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import bell

SCHEMA = "# neurosdp-v1"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    return str(v)


def render(header: Sequence[str], rows: Iterable[Sequence], footer: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    buf.write(SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    for line in footer:
        buf.write(f"# {line}\n")
    return buf.getvalue()


def write_table(path, header, rows, footer=()) -> None:
    Path(path).write_text(render(header, rows, footer), encoding="utf-8")


def read_table(path) -> tuple[list[str], list[list[str]]]:
    """Header and rows of a CSV file; ``#`` comment lines are skipped."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
             if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: no header row")
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def write_behaviors(path, probs) -> None:
    probs = np.atleast_2d(probs)
    rows = ([f"{v:.17g}" for v in row] for row in probs)
    write_table(path, bell.COLUMNS, rows)


def read_behaviors(path, atol: float = 1e-9) -> np.ndarray:
    """Behaviors from a CSV whose columns include the 16 ``p{a}{b}x{x}y{y}`` names (any order)."""
    header, rows = read_table(path)
    missing = [c for c in bell.COLUMNS if c not in header]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    idx = [header.index(c) for c in bell.COLUMNS]
    try:
        probs = np.array([[float(r[i]) for i in idx] for r in rows], dtype=float).reshape(-1, 16)
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed row ({exc})") from None
    if probs.shape[0] == 0:
        raise ValueError(f"{path}: no behaviors")
    bell.check_behaviors(probs, atol=atol)
    return probs
