"""Text formats: onset files, score files and trajectory CSV.

Onset file::

    #onsets v1
    0.000000000
    0.250000000 1
    0.400000000 0

One event per line: time in seconds and an optional kind (1 onset, 0
offset, 2 outlier).  Blank lines and ``#`` comments after the header are
ignored.

Score file::

    #score v1
    0 0
    1/2 1/2
    3/2 1

One line per onset: location ``c_k`` and interval ``gamma_k`` as exact
rationals.  The first line's interval is ignored (written as 0).

Floats are written with 9 decimals.
"""
from __future__ import annotations

import csv
import io
import math
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, TextIO

import numpy as np

from .score import Score
from .tempo import EventKind, OnsetSequence

ONSET_HEADER = "#onsets v1"
SCORE_HEADER = "#score v1"
TRAJECTORY_COLUMNS = ("k", "y_k", "tau_mean", "delta_mean", "omega_mean", "tau_var", "delta_var", "gamma_map", "c_map")
TRACE_COLUMNS = ("sweep", "rho", "log_posterior", "best_so_far")
PRECISION = 9


class FormatError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = ""):
        self.line = line
        where = f"{source or 'input'}"
        if line is not None:
            where += f", line {line}"
        super().__init__(f"{where}: {message}")


def fmt_float(x: float) -> str:
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    s = f"{x:.{PRECISION}f}"
    return "0.000000000" if s == "-0.000000000" else s


def fmt_frac(x) -> str:
    if x is None:
        return ""
    x = Fraction(x)
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


def _text(src) -> tuple[str, str]:
    if isinstance(src, Path):
        return src.read_text(), str(src)
    if hasattr(src, "read"):
        return src.read(), getattr(src, "name", "input")
    return str(src), "input"


def _body(lines: Iterable[str], header: str, source: str) -> Iterator[tuple[int, list[str]]]:
    """Yield ``(line_number, fields)`` after checking the header."""
    seen_header = False
    for n, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not seen_header:
            if not line:
                continue
            if line != header:
                raise FormatError(f"expected header {header!r}, got {line!r}", n, source)
            seen_header = True
            continue
        if not line or line.startswith("#"):
            continue
        yield n, line.split()
    if not seen_header:
        raise FormatError(f"missing header {header!r}", None, source)


def parse_onset_line(n: int, fields: list[str], source: str = "input") -> tuple[float, EventKind]:
    if len(fields) not in (1, 2):
        raise FormatError(f"expected 1 or 2 fields, got {len(fields)}", n, source)
    try:
        t = float(fields[0])
    except ValueError:
        raise FormatError(f"not a number: {fields[0]!r}", n, source) from None
    if not math.isfinite(t):
        raise FormatError("onset time must be finite", n, source)
    kind = EventKind.ONSET
    if len(fields) == 2:
        if fields[1] not in ("0", "1", "2"):
            raise FormatError(f"event kind must be 0, 1 or 2, got {fields[1]!r}", n, source)
        kind = EventKind(int(fields[1]))
    return t, kind


def iter_onsets(lines: Iterable[str], source: str = "input") -> Iterator[tuple[int, float, EventKind]]:
    """Parse lazily, for streaming input."""
    for n, fields in _body(lines, ONSET_HEADER, source):
        t, kind = parse_onset_line(n, fields, source)
        yield n, t, kind


def read_onsets(src) -> OnsetSequence:
    text, source = _text(src)
    times, kinds = [], []
    for _, t, kind in iter_onsets(text.splitlines(), source):
        times.append(t)
        kinds.append(kind)
    if not times:
        raise FormatError("no onsets", None, source)
    plain = all(k == EventKind.ONSET for k in kinds)
    return OnsetSequence(np.array(times), None if plain else tuple(kinds))


def write_onsets(onsets: OnsetSequence, out: TextIO | None = None) -> str:
    lines = [ONSET_HEADER]
    for k, t in enumerate(onsets.times):
        if onsets.kinds is None:
            lines.append(fmt_float(t))
        else:
            lines.append(f"{fmt_float(t)} {int(onsets.kind(k))}")
    text = "\n".join(lines) + "\n"
    if out is not None:
        out.write(text)
    return text


def read_score(src) -> Score:
    text, source = _text(src)
    locs = []
    for n, fields in _body(text.splitlines(), SCORE_HEADER, source):
        if len(fields) != 2:
            raise FormatError(f"expected 2 fields, got {len(fields)}", n, source)
        try:
            c, g = Fraction(fields[0]), Fraction(fields[1])
        except (ValueError, ZeroDivisionError):
            raise FormatError(f"not a rational: {' '.join(fields)!r}", n, source) from None
        if locs:
            if g < 0:
                raise FormatError("intervals must be non-negative", n, source)
            if c - locs[-1] != g:
                raise FormatError(f"c_k - c_(k-1) = {c - locs[-1]} does not match gamma_k = {g}", n, source)
        locs.append(c)
    if not locs:
        raise FormatError("no score lines", None, source)
    return Score.from_locations(locs)


def write_score(score: Score, out: TextIO | None = None) -> str:
    lines = [SCORE_HEADER]
    locs = score.locations
    gams = (Fraction(0),) + score.gammas
    lines += [f"{fmt_frac(c)} {fmt_frac(g)}" for c, g in zip(locs, gams)]
    text = "\n".join(lines) + "\n"
    if out is not None:
        out.write(text)
    return text


def trajectory_row(row: dict) -> list[str]:
    out = []
    for col in TRAJECTORY_COLUMNS:
        v = row.get(col)
        if col == "k":
            out.append(str(int(v)))
        elif col in ("gamma_map", "c_map"):
            out.append(fmt_frac(v))
        else:
            out.append(fmt_float(v))
    return out


def trajectory_header() -> str:
    return ",".join(TRAJECTORY_COLUMNS)


def write_trajectory(rows: Iterable[dict], out: TextIO | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for row in rows:
        w.writerow(trajectory_row(row))
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text


def read_trajectory(src) -> list[dict]:
    text, _ = _text(src)
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = {"k": int(rec["k"])}
        for col in TRAJECTORY_COLUMNS[1:7]:
            row[col] = float(rec[col])
        for col in ("gamma_map", "c_map"):
            row[col] = Fraction(rec[col]) if rec[col] else None
        rows.append(row)
    return rows


def write_trace(trace: Iterable[dict], out: TextIO | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace:
        w.writerow([str(r["sweep"]), fmt_float(r["rho"]), fmt_float(r["log_posterior"]), fmt_float(r["best_so_far"])])
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text


def write_latent(z: np.ndarray, locations=None, out: TextIO | None = None) -> str:
    """Latent states of a simulation: ``k, c_k, z_0 .. z_{D-1}``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    D = z.shape[1]
    w.writerow(["k", "c_k"] + [f"z{i}" for i in range(D)])
    for k, row in enumerate(z):
        c = fmt_frac(locations[k]) if locations is not None else ""
        w.writerow([str(k), c] + [fmt_float(v) for v in row])
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text
