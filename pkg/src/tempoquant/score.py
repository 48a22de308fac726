"""Priors over quantization locations and scores.

Quantization locations ``c_k`` and score intervals ``gamma_k`` are exact
rationals (:class:`fractions.Fraction`).  Grid positions are never compared
as floats.

Two prior families are provided:

* ``depth``: ``p(c) ~ exp(-lam * d(c mod 1 | S))`` where ``d`` is the
  subdivision depth under a schema ``S``, optionally mixed over several
  schemas.
* ``table``: an explicit table of probabilities for ``c mod 1``.

Both are normalized over one unit period so log-priors are comparable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property, reduce
from typing import Iterable, Mapping, Sequence

import numpy as np

Rational = Fraction


class OffGridError(ValueError):
    """A location is not representable on the prior's subdivision grid."""


def frac(x) -> Fraction:
    """Coerce ints, strings like ``"3/4"`` and Fractions; floats are rejected."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, bool):
        raise TypeError("booleans are not rationals")
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x.strip())
    if isinstance(x, float):
        raise TypeError(f"refusing float {x!r}: pass an exact rational")
    return Fraction(x)


def _lcm(values: Iterable[int]) -> int:
    return reduce(lambda a, b: a * b // math.gcd(a, b), values, 1)


@dataclass(frozen=True)
class SubdivisionSchema:
    divisors: tuple
    lam: float = 1.0

    def __post_init__(self):
        divs = tuple(int(d) for d in self.divisors)
        if not divs:
            raise ValueError("a subdivision schema needs at least one divisor")
        if any(d < 2 for d in divs):
            raise ValueError("divisors must be >= 2")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        object.__setattr__(self, "divisors", divs)
        object.__setattr__(self, "lam", float(self.lam))

    @classmethod
    def binary(cls, levels: int = 8, lam: float = 1.0) -> "SubdivisionSchema":
        return cls((2,) * levels, lam)

    @property
    def resolution(self) -> int:
        """Number of grid points per unit period, ``prod(divisors)``."""
        return math.prod(self.divisors)

    @cached_property
    def log_normalizer(self) -> float:
        P = self.resolution
        depths = np.array([depth(Fraction(j, P), self) for j in range(P)], dtype=float)
        return float(np.log(np.sum(np.exp(-self.lam * depths))))


def depth(c, schema: SubdivisionSchema) -> int:
    """Iteration at which ``c mod 1`` first appears when subdividing by ``schema``.

    Integers have depth 0.
    """
    c = frac(c)
    f = c - math.floor(c)
    if f == 0:
        return 0
    scale = 1
    for i, s in enumerate(schema.divisors, start=1):
        scale *= s
        if (f * scale).denominator == 1:
            return i
    raise OffGridError(f"{c} is not on the grid of schema {list(schema.divisors)}")


@dataclass(frozen=True)
class Score:
    """Score intervals ``gamma_1..gamma_K`` and the first location ``c0``."""

    gammas: tuple
    c0: Fraction = Fraction(0)

    def __post_init__(self):
        g = tuple(frac(x) for x in self.gammas)
        if any(x < 0 for x in g):
            raise ValueError("score intervals must be non-negative")
        c0 = frac(self.c0)
        object.__setattr__(self, "gammas", g)
        object.__setattr__(self, "c0", c0)

    @classmethod
    def from_locations(cls, locations: Sequence) -> "Score":
        c = [frac(x) for x in locations]
        if not c:
            raise ValueError("need at least one location")
        return cls(tuple(b - a for a, b in zip(c, c[1:])), c[0])

    @property
    def locations(self) -> tuple:
        out = [self.c0]
        for g in self.gammas:
            out.append(out[-1] + g)
        return tuple(out)

    def __len__(self):
        return len(self.gammas)

    def replace(self, start: int, values: Sequence) -> "Score":
        """Copy with ``gammas[start:start+len(values)]`` replaced (0-based)."""
        g = list(self.gammas)
        g[start:start + len(values)] = [frac(v) for v in values]
        return Score(tuple(g), self.c0)


@dataclass(frozen=True)
class ScorePrior:
    """Prior over locations.

    ``mode="depth"`` mixes ``schemas`` with weights ``schema_probs``;
    ``mode="table"`` uses ``table`` (keys in ``[0, 1)``) with ``floor`` for
    fractions not listed, renormalized over the ``1/denominator`` grid.
    """

    mode: str = "depth"
    schemas: tuple = (SubdivisionSchema((2, 2, 2, 2)),)
    schema_probs: tuple | None = None
    table: Mapping | None = None
    floor: float = 1e-6
    denominator: int | None = None
    gamma_grid: tuple = field(default_factory=lambda: default_grid())

    def __post_init__(self):
        object.__setattr__(self, "gamma_grid", tuple(sorted(frac(g) for g in self.gamma_grid)))
        if any(g < 0 for g in self.gamma_grid):
            raise ValueError("gamma grid values must be non-negative")
        if self.mode == "depth":
            if not self.schemas:
                raise ValueError("depth mode needs at least one schema")
            probs = self.schema_probs or tuple([1.0 / len(self.schemas)] * len(self.schemas))
            if len(probs) != len(self.schemas) or any(p <= 0 for p in probs):
                raise ValueError("schema probabilities must be positive, one per schema")
            tot = float(sum(probs))
            object.__setattr__(self, "schema_probs", tuple(float(p) / tot for p in probs))
        elif self.mode == "table":
            if not self.table:
                raise ValueError("table mode needs a probability table")
            tbl = {}
            for k, v in self.table.items():
                k = frac(k)
                if not 0 <= k < 1:
                    raise ValueError(f"table key {k} outside [0, 1)")
                if not v > 0:
                    raise ValueError("table probabilities must be positive")
                tbl[k] = float(v)
            object.__setattr__(self, "table", tbl)
            if not self.floor > 0:
                raise ValueError("floor probability must be positive")
        else:
            raise ValueError(f"unknown prior mode {self.mode!r}")

    @cached_property
    def resolution(self) -> int:
        """Grid points per unit period on which the prior is defined."""
        if self.mode == "depth":
            return _lcm(s.resolution for s in self.schemas)
        if self.denominator:
            return int(self.denominator)
        return _lcm([k.denominator for k in self.table] + [g.denominator for g in self.gamma_grid])

    @cached_property
    def _table_log_z(self) -> float:
        G = self.resolution
        listed = sum(1 for k in self.table if (k * G).denominator == 1)
        return math.log(sum(self.table.values()) + (G - listed) * self.floor)

    def log_prior_c(self, c) -> float:
        return log_prior_c(c, self)

    def compile(self, extra_denominators: Iterable[int] = ()) -> "CompiledPrior":
        return CompiledPrior.build(self, extra_denominators)


def default_grid(step: Fraction = Fraction(1, 4), top: Fraction = Fraction(3)) -> tuple:
    """``{0, 1/4, ..., 3}``, the fixed proposal grid used for the clave benchmark."""
    n = int(top / step)
    return tuple(step * i for i in range(n + 1))


def log_prior_c(c, prior: ScorePrior) -> float:
    """Log prior of a single location, normalized per unit period."""
    c = frac(c)
    f = c - math.floor(c)
    if prior.mode == "table":
        return math.log(prior.table.get(f, prior.floor)) - prior._table_log_z
    terms = []
    for schema, w in zip(prior.schemas, prior.schema_probs):
        try:
            d = depth(f, schema)
        except OffGridError:
            continue
        terms.append(math.log(w) - schema.lam * d - schema.log_normalizer)
    if not terms:
        raise OffGridError(f"{c} is off the grid of every schema")
    m = max(terms)
    return m + math.log(sum(math.exp(t - m) for t in terms))


def log_prior_score(score: Score, prior: ScorePrior) -> float:
    """Sum of location log-priors over ``c_1..c_K`` (``c_0`` is not scored)."""
    return sum(log_prior_c(c, prior) for c in score.locations[1:])


def conditional_log_prior(score: Score, k_range: range | tuple, replacement: Sequence, prior: ScorePrior) -> float:
    """Joint log prior of ``score`` with ``gammas[k_range]`` replaced.

    ``k_range`` is a 0-based half-open range over ``score.gammas``.  Every
    location from the start of the range onward is rescored, since a change
    in one interval shifts all later locations.
    """
    if isinstance(k_range, tuple):
        k_range = range(*k_range)
    start, stop = k_range.start, k_range.stop
    if len(replacement) != stop - start:
        raise ValueError("replacement length must match the range")
    if not 0 <= start <= stop <= len(score.gammas):
        raise IndexError("range outside the score")
    locs = score.locations
    head = sum(log_prior_c(c, prior) for c in locs[1:start + 1])
    c = locs[start]
    tail = 0.0
    gammas = list(replacement) + list(score.gammas[stop:])
    for g in gammas:
        c = c + frac(g)
        tail += log_prior_c(c, prior)
    return head + tail


@dataclass(frozen=True)
class CompiledPrior:
    """Integer-tick lookup table for inner loops.

    Locations are held as integers in units of ``1/ticks``; ``lp[r]`` is the
    log prior of residue ``r`` (``-inf`` where the prior puts no mass).
    """

    ticks: int
    lp: np.ndarray

    @classmethod
    def build(cls, prior: ScorePrior, extra_denominators: Iterable[int] = ()) -> "CompiledPrior":
        G = _lcm([prior.resolution, *[g.denominator for g in prior.gamma_grid], *extra_denominators])
        lp = np.empty(G)
        for r in range(G):
            try:
                lp[r] = log_prior_c(Fraction(r, G), prior)
            except OffGridError:
                lp[r] = -np.inf
        lp.setflags(write=False)
        return cls(G, lp)

    def to_ticks(self, x) -> int:
        x = frac(x) * self.ticks
        if x.denominator != 1:
            raise OffGridError(f"{x / self.ticks} is not a multiple of 1/{self.ticks}")
        return int(x)

    def from_ticks(self, n: int) -> Fraction:
        return Fraction(int(n), self.ticks)

    def at(self, c_ticks):
        return self.lp[np.mod(c_ticks, self.ticks)]

    def score_sum(self, c0_ticks: int, gamma_ticks) -> float:
        c = c0_ticks + np.cumsum(np.asarray(gamma_ticks, dtype=np.int64))
        return float(np.sum(self.at(c))) if len(c) else 0.0
