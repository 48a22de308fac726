"""Edit distance, the synthetic clave generator and the method-comparison harness."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import cost
from .pipeline import MethodConfig, transcribe
from .score import Score, ScorePrior, default_grid
from .tempo import OnsetSequence, TempoParams, log_joint

log = logging.getLogger(__name__)

CLAVE_PATTERN = (Fraction(3, 4), Fraction(3, 4), Fraction(1), Fraction(1, 2), Fraction(1))


def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def edit_distance(a: Score, b: Score, exclude_zero: bool = False) -> int:
    """Levenshtein distance between interval sequences; ``a`` is the reference.

    With ``exclude_zero`` the positions where the reference interval is 0
    are dropped from both sequences, which must then be aligned onset for onset.
    """
    ta, tb = list(a.gammas), list(b.gammas)
    if exclude_zero:
        if len(ta) != len(tb):
            raise ValueError("exclude_zero needs scores over the same onsets")
        keep = [i for i, g in enumerate(ta) if g != 0]
        ta = [ta[i] for i in keep]
        tb = [tb[i] for i in keep]
    return levenshtein(ta, tb)


@dataclass(frozen=True)
class Modulation:
    """``omega(c) = amplitude * sin(2 pi c / period_beats)``; ``kind="none"`` keeps omega at 0."""

    kind: str = "sinusoidal"
    amplitude: float = 0.3
    period_beats: float = 32.0

    def __post_init__(self):
        if self.kind not in ("none", "sinusoidal"):
            raise ValueError(f"unknown modulation {self.kind!r}")
        if self.kind == "sinusoidal" and not self.period_beats > 0:
            raise ValueError("period must be positive")

    def omega(self, c) -> np.ndarray:
        c = np.asarray([float(x) for x in np.atleast_1d(c)])
        if self.kind == "none":
            return np.zeros_like(c)
        return self.amplitude * np.sin(2 * math.pi * c / self.period_beats)


NO_MODULATION = Modulation("none")


def clave_score(n_onsets: int, pattern: Sequence = CLAVE_PATTERN) -> Score:
    if n_onsets < 1:
        raise ValueError("need at least one onset")
    gam = [pattern[i % len(pattern)] for i in range(n_onsets - 1)]
    return Score(tuple(gam))


def gen_clave(n_onsets: int = 11, base_tempo: float = 1.0, modulation: Modulation = Modulation(),
              R: float = 0.025 ** 2, seed: int | None = None, pattern: Sequence = CLAVE_PATTERN):
    """Clave onsets under a deterministic tempo curve plus Gaussian timing noise.

    The period at onset ``k`` is ``2**omega(c_k) * base_tempo`` and the next
    onset lands ``gamma * period`` later.  Returns ``(onsets, score, traj)``
    where ``traj`` has columns ``(c, tau, delta, omega)``.
    """
    score = clave_score(n_onsets, pattern)
    c = score.locations
    omega = modulation.omega(c)
    delta = base_tempo * np.exp2(omega)
    tau = np.zeros(n_onsets)
    for k in range(1, n_onsets):
        tau[k] = tau[k - 1] + float(score.gammas[k - 1]) * delta[k - 1]
    rng = np.random.default_rng(seed)
    y = tau + (rng.normal(0.0, math.sqrt(R), n_onsets) if R > 0 else 0.0)
    traj = np.column_stack([[float(x) for x in c], tau, delta, omega])
    return OnsetSequence(y), score, traj


@dataclass(frozen=True)
class ClaveProblem:
    n_onsets: int = 11
    base_tempo: float = 1.0
    modulation: Modulation = Modulation()
    R: float = 0.025 ** 2
    params: TempoParams | None = None
    prior: ScorePrior = field(default_factory=ScorePrior)

    def model(self) -> TempoParams:
        """Inference parameters: the given ones, or defaults matched to the generator.

        The defaults are a two-dimensional model with noise levels close to an
        EM fit on generator output, and an initial period known to about 10%.
        """
        if self.params is not None:
            return self.params
        b = self.base_tempo
        return TempoParams.random_walk(
            Q=((0.006 * b) ** 2, (0.04 * b) ** 2),
            R=max(self.R, 1e-8),
            prior_delta_mean=b,
            prior_delta_var=(0.1 * b) ** 2,
        )

    def instance(self, seed: int):
        return gen_clave(self.n_onsets, self.base_tempo, self.modulation, self.R, seed)


@dataclass(frozen=True)
class TrialResult:
    method: str
    trial: int
    edit_distance: float
    loglik_diff: float
    cost: int
    wall_time: float
    error: str = ""


@dataclass(frozen=True)
class MethodRecord:
    method: str
    config: dict
    trials: int
    failures: int
    ed_median: float
    ed_q25: float
    ed_q75: float
    lld_median: float
    lld_q25: float
    lld_q75: float
    cost: int
    wall_time: float


def _quartiles(x: Sequence[float]):
    if not len(x):
        return (math.nan,) * 3
    q = np.percentile(np.asarray(x, dtype=float), [50, 25, 75])
    return float(q[0]), float(q[1]), float(q[2])


REPORT_COLUMNS = ("method", "trials", "failures", "ed_median", "ed_q25", "ed_q75",
                  "lld_median", "lld_q25", "lld_q75", "cost", "wall_time")


@dataclass(frozen=True)
class BenchmarkReport:
    records: tuple
    results: tuple = ()

    def record(self, method: str) -> MethodRecord:
        for r in self.records:
            if r.method == method:
                return r
        raise KeyError(method)

    def rows(self, timing: bool = True) -> list:
        out = []
        for r in self.records:
            row = {c: getattr(r, c) for c in REPORT_COLUMNS}
            if not timing:
                row.pop("wall_time")
            out.append(row)
        return out

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        cols = [c for c in REPORT_COLUMNS if timing or c != "wall_time"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.rows(timing):
            w.writerow({k: _fmt(v) for k, v in row.items()})
        return buf.getvalue()

    def to_table(self) -> str:
        cols = list(REPORT_COLUMNS)
        body = [[_fmt(row[c], 4) for c in cols] for row in self.rows()]
        widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(cols)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
        lines += ["  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(b, widths))) for b in body]
        return "\n".join(lines)


def _fmt(v, digits: int = 9) -> str:
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def method_seed(seed: int, trial: int, label: str) -> int:
    """Seed for one (trial, method) pair; independent of the order methods are run."""
    ss = np.random.SeedSequence([seed, trial, zlib.crc32(label.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, trial]).generate_state(1, dtype=np.uint64)[0] >> 1)


def run_trial(method: MethodConfig, onsets: OnsetSequence, truth: Score, params: TempoParams, prior: ScorePrior,
              seed: int, trial: int = 0, grid: Sequence | None = None) -> TrialResult:
    t0 = time.perf_counter()
    with cost.tracking() as box:
        try:
            est = transcribe(onsets, params, prior, method, seed=seed, grid=grid)
        except Exception as exc:  # recorded, not fatal
            log.warning("%s failed on trial %d: %s", method.label, trial, exc)
            return TrialResult(method.label, trial, math.nan, math.nan, box[0], time.perf_counter() - t0,
                               f"{type(exc).__name__}: {exc}")
    wall = time.perf_counter() - t0
    ed = edit_distance(truth, est.score, exclude_zero=True)
    lld = est.log_posterior - log_joint(truth, onsets, params, prior)
    return TrialResult(method.label, trial, float(ed), float(lld), box[0], wall)


def run_benchmark(methods: Sequence[MethodConfig], problem: ClaveProblem | Sequence = ClaveProblem(),
                  trials: int = 5, seed: int = 0, grid: Sequence | None = None) -> BenchmarkReport:
    """Run every method on ``trials`` instances and aggregate per method.

    ``problem`` is a generator (:class:`ClaveProblem`) or a fixed list of
    ``(onsets, true_score)`` pairs; with a list, ``trials`` is ignored and
    the default model parameters are used.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise ValueError("method labels must be distinct")
    if isinstance(problem, ClaveProblem):
        instances = [problem.instance(trial_seed(seed, t))[:2] for t in range(trials)]
        params, prior = problem.model(), problem.prior
    else:
        instances = [(o, s) for o, s in problem]
        params, prior = TempoParams(), ScorePrior()
    grid = tuple(default_grid() if grid is None else grid)
    results, records = [], []
    for m in methods:
        res = [run_trial(m, on, truth, params, prior, method_seed(seed, t, m.label), t, grid)
               for t, (on, truth) in enumerate(instances)]
        ok = [r for r in res if not r.error]
        ed = _quartiles([r.edit_distance for r in ok])
        lld = _quartiles([r.loglik_diff for r in ok])
        records.append(MethodRecord(m.label, m.as_dict(), len(res), len(res) - len(ok), *ed, *lld,
                                    sum(r.cost for r in res), float(sum(r.wall_time for r in res))))
        results.extend(res)
    return BenchmarkReport(tuple(records), tuple(results))


def default_methods() -> list:
    """Gibbs, SA and II at 10 and 50 sweeps with 1- and 2-slice blocks; greedy and particle filters."""
    out = []
    for kind in ("gibbs", "sa", "ii"):
        for sweeps in (10, 50):
            for block in (1, 2):
                out.append(MethodConfig(kind, sweeps=sweeps, block=block))
    for kind in ("gf", "pf"):
        for n in (5, 10, 50, 100):
            out.append(MethodConfig(kind, particles=n))
    return out
