"""Batch MAP search over score intervals with Rao-Blackwellized Gibbs moves.

One sweep runs a backward pass under the incoming configuration, then scans
blocks of ``L`` consecutive slices from the start.  For each block every
assignment on the grid is scored exactly: the cached forward message at the
slice before the block is pushed through the proposed transitions and
integrated against the backward message at the end of the block.  The prior
term rescores every location from the block onward, since changing one
interval shifts all later locations.

Slice ``k`` (1-based) is the interval ``gamma_k`` between onsets ``k - 1``
and ``k``.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import lds
from .gaussian import GaussianPotential
from .score import Score, ScorePrior, frac
from .tempo import OnsetSequence, TempoParams

log = logging.getLogger(__name__)

INITS = ("greedy-filter", "random", "sample-from-proposal")
# an argmax move must beat the current block by this much to count as a change
_IMPROVE_TOL = 1e-9


class InfeasibleBlockError(RuntimeError):
    """Every assignment of a block has zero probability."""


class ClampedModel:
    """The switching model with observations fixed, evaluated for any gamma.

    ``grids[j]`` lists the admissible values of ``gamma_{j+1}``.
    """

    def __init__(self, onsets: OnsetSequence, params: TempoParams, prior: ScorePrior,
                 grids: Sequence[Sequence] | None = None, c0=Fraction(0)):
        self.onsets = onsets
        self.params = params
        self.prior = prior
        self.K = len(onsets) - 1
        if self.K < 0:
            raise ValueError("need at least one onset")
        if grids is None:
            grids = [prior.gamma_grid] * self.K
        grids = [tuple(sorted(set(frac(g) for g in s))) for s in grids]
        if len(grids) != self.K:
            raise ValueError(f"need {self.K} slice grids, got {len(grids)}")
        if any(not s for s in grids):
            raise ValueError("empty slice grid")
        self.grids = grids
        self.c0 = frac(c0)
        dens = {self.c0.denominator} | {g.denominator for s in grids for g in s}
        self.cp = prior.compile(sorted(dens))
        self.G = self.cp.ticks
        self.grid_ticks = [np.array([self.cp.to_ticks(g) for g in s], dtype=np.int64) for s in grids]
        self.c0t = self.cp.to_ticks(self.c0)
        self.spec = params.lds_spec()
        self.y = np.asarray(onsets.times, dtype=float)
        self.r = np.asarray(onsets.obs_variances(params), dtype=float)
        self.cvec = self.spec.C[0]

    def transitions(self, ticks) -> np.ndarray:
        t = np.asarray(ticks, dtype=np.int64)
        g = (t / self.G)[..., None, None]
        return self.spec.A + g * self.spec.A_gamma

    def to_ticks(self, score: Score) -> np.ndarray:
        if len(score.gammas) != self.K:
            raise ValueError(f"score has {len(score.gammas)} intervals, expected {self.K}")
        if score.c0 != self.c0:
            raise ValueError("score c0 does not match the model")
        t = np.array([self.cp.to_ticks(g) for g in score.gammas], dtype=np.int64)
        return t

    def to_score(self, ticks) -> Score:
        return Score(tuple(self.cp.from_ticks(t) for t in ticks), self.c0)

    def forward(self, ticks):
        """Filtered moments and cumulative log evidence at every slice."""
        D = self.spec.dim
        n = self.K + 1
        mu = np.empty((n, D))
        P = np.empty((n, D, D))
        logz = np.empty(n)
        m, p, ll = lds.kf_update(self.spec.prior_mu, self.spec.prior_cov, self.y[0], self.r[0], self.cvec)
        mu[0], P[0], logz[0] = m, p, ll
        if self.K:
            A = self.transitions(ticks)
            for j in range(1, n):
                m, p = lds.kf_predict(mu[j - 1], P[j - 1], A[j - 1], self.spec.Q)
                m, p, ll = lds.kf_update(m, p, self.y[j], self.r[j], self.cvec)
                mu[j], P[j], logz[j] = m, p, logz[j - 1] + ll
        return mu, P, logz

    def backward(self, ticks):
        A = self.transitions(ticks) if self.K else np.zeros((0, self.spec.dim, self.spec.dim))
        (h, Km, g), _ = lds.backward_canonical(self.spec, A, self.y, self.r)
        return h, Km, g

    def log_prior(self, ticks) -> float:
        return self.cp.score_sum(self.c0t, ticks)

    def log_posterior(self, ticks) -> float:
        """``log p(gamma, y)``."""
        return float(self.forward(ticks)[2][-1]) + self.log_prior(ticks)

    def feasible(self, ticks) -> bool:
        return all(t in s for t, s in zip(ticks, self.grid_ticks))


@dataclass
class SweepState:
    model: ClampedModel
    ticks: np.ndarray
    alpha_mu: np.ndarray
    alpha_P: np.ndarray
    alpha_logz: np.ndarray
    beta: tuple
    log_posterior: float
    rho: float = math.inf
    changed: int = 0
    block_log_q: list = field(default_factory=list)

    @property
    def gamma(self) -> Score:
        return self.model.to_score(self.ticks)

    @property
    def beta_msgs(self) -> list:
        h, Km, g = self.beta
        labels = tuple(range(self.model.spec.dim))
        return [GaussianPotential(h[j], Km[j], g[j], labels) for j in range(len(g))]

    @property
    def alpha_msgs(self) -> list:
        return [lds.potential_from_moments(m, p, z) for m, p, z in zip(self.alpha_mu, self.alpha_P, self.alpha_logz)]


def make_state(model: ClampedModel, gamma, rho: float = math.inf) -> SweepState:
    ticks = model.to_ticks(gamma) if isinstance(gamma, Score) else np.asarray(gamma, dtype=np.int64).copy()
    mu, P, logz = model.forward(ticks)
    beta = model.backward(ticks)
    lp = float(logz[-1]) + model.log_prior(ticks)
    return SweepState(model, ticks, mu, P, logz, beta, lp, rho)


@dataclass
class BlockProposal:
    """Exact scores of every assignment of slices ``k .. k + L - 1``."""

    k: int
    ticks: np.ndarray  # (M, L)
    log_q: np.ndarray  # (M,) log p(gamma, y) with the block replaced
    mu: np.ndarray  # (M, L, D)
    P: np.ndarray
    logz: np.ndarray  # (M, L) cumulative
    cp: object = None

    @property
    def assignments(self) -> list:
        return [tuple(self.cp.from_ticks(t) for t in row) for row in self.ticks]

    def log_probabilities(self, rho: float = 1.0) -> np.ndarray:
        if math.isinf(rho):
            lq = np.where(self.log_q == self.log_q.max(), 0.0, -np.inf)
        else:
            lq = rho * self.log_q
        return lq - logsumexp(lq)

    def probabilities(self, rho: float = 1.0) -> np.ndarray:
        return np.exp(self.log_probabilities(rho))


def _log_integral_against(mu, P, logz, h, Km, g):
    """``log int N(z; mu, P) exp(logz) exp(g + h'z - z'Km z / 2) dz``, batched over the leading axis."""
    D = mu.shape[-1]
    S = np.eye(D) + P @ Km
    _, logdet = np.linalg.slogdet(S)
    b = h - mu @ Km
    SiP = np.linalg.solve(S, P)
    quad = np.einsum("mi,mij,mj->m", b, SiP, b)
    lin = mu @ h - 0.5 * np.einsum("mi,ij,mj->m", mu, Km, mu)
    return logz + g + lin - 0.5 * logdet + 0.5 * quad


def slice_proposal(state: SweepState, k: int, L: int = 1, grid: Sequence | None = None) -> BlockProposal:
    """Score all assignments of ``gamma_k .. gamma_{k+L-1}`` given the rest of ``state``.

    ``grid`` overrides the model's per-slice grids for the block.
    """
    model = state.model
    K = model.K
    if L < 1:
        raise ValueError("block length must be at least 1")
    if not 1 <= k or k + L - 1 > K:
        raise IndexError(f"block {k}..{k + L - 1} outside 1..{K}")
    if grid is not None:
        gt = np.array([model.cp.to_ticks(frac(g)) for g in grid], dtype=np.int64)
        choices = [gt] * L
    else:
        choices = model.grid_ticks[k - 1:k - 1 + L]
    ticks = np.array(list(itertools.product(*choices)), dtype=np.int64).reshape(-1, L)
    M = ticks.shape[0]
    D = model.spec.dim
    mu = np.empty((M, L, D))
    P = np.empty((M, L, D, D))
    logz = np.empty((M, L))
    m = np.broadcast_to(state.alpha_mu[k - 1], (M, D))
    p = np.broadcast_to(state.alpha_P[k - 1], (M, D, D))
    z = np.full(M, state.alpha_logz[k - 1])
    for t in range(L):
        j = k + t
        m, p = lds.kf_predict(m, p, model.transitions(ticks[:, t]), model.spec.Q)
        m, p, ll = lds.kf_update(m, p, model.y[j], model.r[j], model.cvec)
        z = z + ll
        mu[:, t], P[:, t], logz[:, t] = m, p, z
    e = k + L - 1
    h, Km, g = state.beta
    lik = _log_integral_against(mu[:, -1], P[:, -1], logz[:, -1], h[e], Km[e], g[e])

    cp = model.cp
    c_prev = model.c0t + int(np.sum(state.ticks[:k - 1]))
    head = cp.score_sum(model.c0t, state.ticks[:k - 1])
    c_block = c_prev + np.cumsum(ticks, axis=1)
    lp = head + np.sum(cp.at(c_block), axis=1)
    if e < K:
        c_old = model.c0t + np.cumsum(state.ticks)
        shift = c_block[:, -1] - c_old[e - 1]
        lp = lp + np.sum(cp.at(c_old[None, e:] + shift[:, None]), axis=1)
    log_q = lik + lp
    log_q = np.where(np.isnan(log_q), -np.inf, log_q)
    if not np.isfinite(log_q).any():
        raise InfeasibleBlockError(f"every assignment of slices {k}..{e} has zero probability")
    return BlockProposal(k, ticks, log_q, mu, P, logz, cp)


def _draw(logits: np.ndarray, rng: np.random.Generator) -> int:
    p = np.exp(logits - logsumexp(logits))
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    return int(min(np.searchsorted(cdf, rng.random(), side="right"), len(p) - 1))


def gibbs_sweep(state: SweepState, L: int = 1, rho: float = math.inf,
                rng: np.random.Generator | int | None = None) -> SweepState:
    """One deterministic-scan sweep; returns a new state.

    ``rho = inf`` picks the best block assignment and keeps the current one
    unless another beats it.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    model = state.model
    ticks = state.ticks.copy()
    new = SweepState(model, ticks, state.alpha_mu.copy(), state.alpha_P.copy(), state.alpha_logz.copy(),
                     model.backward(ticks), state.log_posterior, rho)
    changed = 0
    for k in range(1, model.K + 1, L):
        Lb = min(L, model.K - k + 1)
        prop = slice_proposal(new, k, Lb)
        cur = ticks[k - 1:k - 1 + Lb]
        matches = np.flatnonzero(np.all(prop.ticks == cur, axis=1))
        if math.isinf(rho):
            i = int(np.argmax(prop.log_q))
            if matches.size and prop.log_q[matches[0]] >= prop.log_q[i] - _IMPROVE_TOL:
                i = int(matches[0])
        else:
            i = _draw(rho * prop.log_q, rng)
        if not (matches.size and i == matches[0]):
            changed += 1
        ticks[k - 1:k - 1 + Lb] = prop.ticks[i]
        new.alpha_mu[k:k + Lb] = prop.mu[i]
        new.alpha_P[k:k + Lb] = prop.P[i]
        new.alpha_logz[k:k + Lb] = prop.logz[i]
        new.block_log_q.append(float(prop.log_q[i]))
    # every slice was refreshed by its own block update
    new.log_posterior = float(new.alpha_logz[-1]) + model.log_prior(ticks)
    new.changed = changed
    return new


def linear_schedule(n_sweeps: int = 50, start: float = 0.1, stop: float = 10.0, n_linear: int | None = None) -> list:
    """Linear inverse temperatures over the first ~2/3 of the sweeps, then ``inf``."""
    if n_sweeps < 1:
        raise ValueError("need at least one sweep")
    if n_linear is None:
        n_linear = max(1, round(33 * n_sweeps / 50))
    n_linear = min(n_linear, n_sweeps)
    lin = list(np.linspace(start, stop, n_linear)) if n_linear > 1 else [stop]
    return [float(r) for r in lin] + [math.inf] * (n_sweeps - n_linear)


def _filter_init(model: ClampedModel, how: str, rng: np.random.Generator) -> np.ndarray:
    from . import smc

    union = sorted({g for s in model.grids for g in s})
    greedy = how == "greedy-filter"
    ps = smc.rbpf_init(model.params, model.prior, float(model.y[0]), 1, model.onsets.kind(0), union, model.c0)
    seed = int(rng.integers(2 ** 63))
    sub = np.random.default_rng(seed)
    for k in range(1, model.K + 1):
        ps = smc.rbpf_step(
            ps, float(model.y[k]), model.onsets.kind(k), model.grids[k - 1],
            "greedy" if greedy else "multinomial", sub, 1, 1e-8 if greedy else 0.0,
        )
    return model.to_ticks(smc.map_extract(ps))


def _initial_ticks(model: ClampedModel, init, rng: np.random.Generator) -> np.ndarray:
    if isinstance(init, Score):
        t = model.to_ticks(init)
        if not model.feasible(t):
            raise ValueError("initial score is outside the slice grids")
        return t
    if init not in INITS:
        raise ValueError(f"init must be a Score or one of {INITS}")
    if model.K == 0:
        return np.zeros(0, dtype=np.int64)
    return _filter_init(model, "greedy-filter" if init == "greedy-filter" else "random", rng)


def _model(onsets, params, prior, grid, grids, c0):
    if grids is None and grid is not None:
        grids = [tuple(grid)] * (len(onsets) - 1)
    return ClampedModel(onsets, params, prior, grids, c0)


@dataclass
class _Best:
    ticks: np.ndarray | None = None
    value: float = -math.inf

    def offer(self, state: SweepState):
        if state.log_posterior > self.value:
            self.value = state.log_posterior
            self.ticks = state.ticks.copy()


def run_sa(onsets: OnsetSequence, params: TempoParams, prior: ScorePrior, schedule: Sequence[float] | None = None,
           init="greedy-filter", seed: int | None = None, block: int = 1, grid: Sequence | None = None,
           grids: Sequence[Sequence] | None = None, reinit_on_converge: bool = True, c0=Fraction(0)):
    """Anneal through ``schedule``; return the best configuration visited and a per-sweep trace.

    When a sweep at ``rho = inf`` changes nothing the chain is restarted from
    a one-particle filter that samples its proposal (if ``reinit_on_converge``).
    """
    schedule = linear_schedule(50) if schedule is None else [float(r) for r in schedule]
    if not schedule:
        raise ValueError("schedule must be non-empty")
    rng = np.random.default_rng(seed)
    model = _model(onsets, params, prior, grid, grids, c0)
    state = make_state(model, _initial_ticks(model, init, rng))
    best = _Best()
    best.offer(state)
    trace = []
    for i, rho in enumerate(schedule, start=1):
        if model.K:
            state = gibbs_sweep(state, block, rho, rng)
        best.offer(state)
        trace.append({"sweep": i, "rho": rho, "log_posterior": state.log_posterior, "best_so_far": best.value})
        if reinit_on_converge and math.isinf(rho) and state.changed == 0 and model.K and i < len(schedule):
            state = make_state(model, _initial_ticks(model, "random", rng))
            best.offer(state)
    return model.to_score(best.ticks), trace


def run_gibbs(onsets: OnsetSequence, params: TempoParams, prior: ScorePrior, sweeps: int = 50, init="greedy-filter",
              seed: int | None = None, block: int = 1, grid: Sequence | None = None,
              grids: Sequence[Sequence] | None = None, rho: float = 1.0, c0=Fraction(0)):
    """Plain Gibbs sampling; the best configuration visited is reported as the MAP estimate."""
    return run_sa(onsets, params, prior, [rho] * sweeps, init, seed, block, grid, grids, False, c0)


def run_ii(onsets: OnsetSequence, params: TempoParams, prior: ScorePrior, restarts: int = 1,
           init="greedy-filter", reinit: str = "sample-from-proposal", seed: int | None = None, block: int = 1,
           grid: Sequence | None = None, grids: Sequence[Sequence] | None = None, max_sweeps: int = 100,
           sweep_budget: int | None = None, c0=Fraction(0)):
    """Coordinate ascent to a local maximum, restarted ``restarts`` times.

    The first start uses ``init``; later ones use ``reinit``.  ``sweep_budget``
    caps the total number of sweeps across restarts.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if reinit not in INITS:
        raise ValueError(f"reinit must be one of {INITS}")
    rng = np.random.default_rng(seed)
    model = _model(onsets, params, prior, grid, grids, c0)
    best = _Best()
    trace = []
    n = 0
    for r in range(restarts):
        if sweep_budget is not None and n >= sweep_budget:
            break
        state = make_state(model, _initial_ticks(model, init if r == 0 else reinit, rng))
        best.offer(state)
        for _ in range(max_sweeps):
            if not model.K or (sweep_budget is not None and n >= sweep_budget):
                break
            state = gibbs_sweep(state, block, math.inf, rng)
            n += 1
            best.offer(state)
            trace.append({"sweep": n, "rho": math.inf, "log_posterior": state.log_posterior,
                          "best_so_far": best.value, "restart": r})
            if state.changed == 0:
                break
    return model.to_score(best.ticks), trace


def enumerate_map(onsets: OnsetSequence, params: TempoParams, prior: ScorePrior, grid: Sequence | None = None,
                  grids: Sequence[Sequence] | None = None, c0=Fraction(0)):
    """Exact MAP by scoring every configuration; exponential in the number of intervals.

    Returns ``(score, log_posterior)``; ties go to the lexicographically smallest.
    """
    model = _model(onsets, params, prior, grid, grids, c0)
    best, best_v = None, -math.inf
    for t in itertools.product(*model.grid_ticks):
        t = np.array(t, dtype=np.int64)
        v = model.log_posterior(t)
        if v > best_v:
            best, best_v = t, v
    if best is None:
        raise InfeasibleBlockError("no configuration has positive probability")
    return model.to_score(best), best_v
