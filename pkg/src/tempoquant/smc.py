"""Rao-Blackwellized sequential Monte Carlo over score intervals.

Each particle is a discrete trajectory ``gamma_{1:k}`` together with the
exact Gaussian filtering potential ``phi = p(y_{0:k}, z_k | gamma_{1:k})``.
At every onset all particles are expanded over the gamma grid, the
expansions are scored by ``q = Z * p(gamma_{1:k})`` and ``N`` of them are
kept by one of the selection rules:

``multinomial``
    draw ``N`` (particle, gamma) pairs from the optimal proposal, weighted by
    the incoming importance weights; equal weights afterwards.
``greedy``
    keep the ``N`` highest ``q`` without replacement (split-track filter).
``hybrid``
    keep the single best pair, draw the remaining ``N - 1``.
``expand``
    keep everything (exhaustive; exponential, for oracles and tiny inputs).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import lds
from .gaussian import GaussianPotential
from .score import CompiledPrior, Score, ScorePrior, frac
from .tempo import EventKind, OnsetSequence, TempoParams, candidate_mask

log = logging.getLogger(__name__)

SELECTIONS = ("multinomial", "greedy", "hybrid", "expand")


class NoFeasibleExtensionError(RuntimeError):
    """Every (particle, gamma) extension has zero probability."""


@dataclass(frozen=True)
class Particle:
    trajectory: tuple
    phi: GaussianPotential
    log_weight: float
    log_likelihood: float
    log_prior: float


@dataclass(frozen=True)
class FilterEstimate:
    tau_mean: float
    delta_mean: float
    tau_var: float
    delta_var: float
    log_evidence: float
    ess: float


@dataclass
class StepRecord:
    support: tuple
    ess: float
    n_distinct: int


@dataclass
class ParticleSet:
    """Particles held as parallel arrays.

    ``gamma`` holds trajectories in integer ticks of ``1/prior.ticks``;
    ``log_z`` is ``log p(y_{0:k} | gamma)``; ``log_prior`` is the score
    log-prior; ``log_w`` are normalized log importance weights used for
    filtering estimates.
    """

    params: TempoParams
    prior: CompiledPrior
    grid: tuple
    c0: Fraction
    gamma: np.ndarray
    c: np.ndarray
    mu: np.ndarray
    P: np.ndarray
    log_z: np.ndarray
    log_prior: np.ndarray
    log_w: np.ndarray
    log_evidence: float
    k: int = 0
    history: list = field(default_factory=list)

    def __len__(self):
        return self.mu.shape[0]

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    @property
    def log_joint(self) -> np.ndarray:
        """``log p(gamma_{1:k}, y_{0:k})`` per particle."""
        return self.log_z + self.log_prior

    def trajectory(self, i: int) -> tuple:
        return tuple(self.prior.from_ticks(t) for t in self.gamma[i])

    def particle(self, i: int) -> Particle:
        phi = lds.potential_from_moments(self.mu[i], self.P[i], float(self.log_z[i]))
        return Particle(
            self.trajectory(i), phi, float(self.log_joint[i]), float(self.log_z[i]), float(self.log_prior[i])
        )

    @property
    def particles(self) -> list:
        return [self.particle(i) for i in range(self.n)]

    def normalized_weights(self) -> np.ndarray:
        w = np.exp(self.log_w - logsumexp(self.log_w))
        return w / w.sum()

    def supports(self) -> list:
        """Distinct gamma values seen at each slice (as Fractions)."""
        return [tuple(self.prior.from_ticks(t) for t in rec.support) for rec in self.history]


def _grid_ticks(cp: CompiledPrior, grid) -> np.ndarray:
    return np.array([cp.to_ticks(g) for g in grid], dtype=np.int64)


def rbpf_init(
    params: TempoParams,
    prior: ScorePrior,
    y0: float,
    n_particles: int = 1,
    kind=EventKind.ONSET,
    grid: Sequence | None = None,
    c0=Fraction(0),
) -> ParticleSet:
    """All particles start from ``phi_0 = p(z_0) p(y_0 | z_0)`` with empty trajectories."""
    if n_particles < 1:
        raise ValueError("need at least one particle")
    grid = tuple(sorted(frac(g) for g in (grid if grid is not None else prior.gamma_grid)))
    if not grid:
        raise ValueError("empty gamma grid")
    c0 = frac(c0)
    cp = prior.compile([c0.denominator] + [g.denominator for g in grid])
    spec = params.lds_spec()
    mu, P, ll = lds.kf_update(
        spec.prior_mu, spec.prior_cov, np.float64(y0), np.float64(params.obs_variance(kind)), spec.C[0]
    )
    N = n_particles
    D = params.dim
    return ParticleSet(
        params=params,
        prior=cp,
        grid=grid,
        c0=c0,
        gamma=np.zeros((N, 0), dtype=np.int64),
        c=np.full(N, cp.to_ticks(c0), dtype=np.int64),
        mu=np.broadcast_to(mu, (N, D)).copy(),
        P=np.broadcast_to(P, (N, D, D)).copy(),
        log_z=np.full(N, float(ll)),
        log_prior=np.zeros(N),
        log_w=np.full(N, -math.log(N)),
        log_evidence=float(ll),
    )


def _sample_indices(logits: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    p = np.exp(logits - logsumexp(logits))
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    u = rng.random(n)
    return np.searchsorted(cdf, u, side="right").clip(max=len(p) - 1)


def expand(ps: ParticleSet, y_k: float, kind=EventKind.ONSET, grid: Sequence | None = None,
           prune_threshold: float = 0.0):
    """Score every (particle, gamma) extension.

    Returns ``(grid_ticks, mu, P, ll_inc, log_prior_inc)`` with shapes
    ``(S,)``, ``(N, S, D)``, ``(N, S, D, D)``, ``(N, S)``, ``(N, S)``.
    """
    params = ps.params
    grid = ps.grid if grid is None else tuple(frac(g) for g in grid)
    gt = _grid_ticks(ps.prior, grid)
    spec = params.lds_spec()
    A = spec.transitions([float(g) for g in grid])[None]  # (1, S, D, D)
    mu_p, P_p = lds.kf_predict(ps.mu[:, None, :], ps.P[:, None, :, :], A, spec.Q)
    r = params.obs_variance(kind)
    mu_n, P_n, ll = lds.kf_update(mu_p, P_p, np.float64(y_k), np.float64(r), spec.C[0])
    lp = ps.prior.at(ps.c[:, None] + gt[None, :])
    if prune_threshold > 0:
        ll = np.where(candidate_mask(ll, prune_threshold), ll, -np.inf)
    return gt, mu_n, P_n, ll, lp


def rbpf_step(
    ps: ParticleSet,
    y_k: float,
    kind=EventKind.ONSET,
    grid: Sequence | None = None,
    selection: str = "multinomial",
    rng: np.random.Generator | int | None = None,
    n_particles: int | None = None,
    prune_threshold: float = 1e-8,
) -> ParticleSet:
    """Extend the particle set by one observation."""
    if selection not in SELECTIONS:
        raise ValueError(f"selection must be one of {SELECTIONS}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    N_out = n_particles or ps.n
    gt, mu_n, P_n, ll, lp = expand(ps, y_k, kind, grid, prune_threshold)
    S = gt.size
    log_q = (ps.log_z + ps.log_prior)[:, None] + ll + lp
    flat_q = log_q.ravel()
    finite = np.isfinite(flat_q)
    if not finite.any():
        raise NoFeasibleExtensionError(f"no feasible extension at step {ps.k + 1} (y = {y_k})")
    # incremental weight p(gamma_k, y_k | past), times incoming importance weight
    sel_logits = (ps.log_w[:, None] + ll + lp).ravel()

    if selection == "expand":
        idx = np.flatnonzero(finite)
        new_log_w = flat_q[idx] - logsumexp(flat_q[idx])
        log_evidence = float(logsumexp(flat_q[idx]))
    elif selection == "greedy":
        order = np.argsort(-flat_q, kind="stable")
        idx = order[: min(N_out, int(finite.sum()))]
        new_log_w = flat_q[idx] - logsumexp(flat_q[idx])
        log_evidence = float(logsumexp(flat_q[idx]))
    else:
        inc = float(logsumexp(sel_logits))
        if selection == "multinomial":
            idx = _sample_indices(sel_logits, N_out, rng)
        else:
            best = int(np.argmax(flat_q))
            rest = _sample_indices(sel_logits, N_out - 1, rng) if N_out > 1 else np.zeros(0, dtype=np.int64)
            idx = np.concatenate([[best], rest]).astype(np.int64)
        new_log_w = np.full(idx.size, -math.log(idx.size))
        log_evidence = ps.log_evidence + inc

    parent, s_idx = np.divmod(idx, S)
    new_gamma = np.concatenate([ps.gamma[parent], gt[s_idx][:, None]], axis=1)
    out = ParticleSet(
        params=ps.params,
        prior=ps.prior,
        grid=ps.grid,
        c0=ps.c0,
        gamma=new_gamma,
        c=ps.c[parent] + gt[s_idx],
        mu=mu_n[parent, s_idx],
        P=P_n[parent, s_idx],
        log_z=ps.log_z[parent] + ll[parent, s_idx],
        log_prior=ps.log_prior[parent] + lp[parent, s_idx],
        log_w=new_log_w,
        log_evidence=log_evidence,
        k=ps.k + 1,
        history=ps.history + [None],
    )
    w = np.exp(new_log_w)
    ess = float(1.0 / np.sum(w * w))
    support = tuple(sorted(set(int(t) for t in new_gamma[:, -1])))
    n_distinct = len({row.tobytes() for row in new_gamma})
    out.history[-1] = StepRecord(support, ess, n_distinct)
    return out


def filter_estimate(ps: ParticleSet) -> FilterEstimate:
    """Mixture moments of ``tau`` and the beat period under the normalized weights."""
    w = ps.normalized_weights()
    v = ps.params.period_vector
    tau_m = ps.mu[:, 0]
    tau_v = ps.P[:, 0, 0]
    del_m = ps.mu @ v
    del_v = np.einsum("i,nij,j->n", v, ps.P, v)
    tm = float(w @ tau_m)
    dm = float(w @ del_m)
    # centred form: E[x^2] - m^2 cancels badly when tau is large
    tv = float(w @ (tau_v + (tau_m - tm) ** 2))
    dv = float(w @ (del_v + (del_m - dm) ** 2))
    return FilterEstimate(tm, dm, tv, dv, ps.log_evidence, float(1.0 / np.sum(w * w)))


def best_index(ps: ParticleSet) -> int:
    """Particle with the highest joint; ties go to the lexicographically smallest trajectory."""
    lj = ps.log_joint
    top = np.flatnonzero(lj == lj.max())
    if top.size == 1:
        return int(top[0])
    return int(min(top, key=lambda i: tuple(ps.gamma[i])))


def map_extract(ps: ParticleSet) -> Score:
    i = best_index(ps)
    return Score(ps.trajectory(i), ps.c0)


@dataclass
class FilterRun:
    particles: ParticleSet
    estimates: list

    @property
    def map_score(self) -> Score:
        return map_extract(self.particles)


def run_filter(
    onsets: OnsetSequence,
    params: TempoParams,
    prior: ScorePrior,
    n_particles: int = 10,
    selection: str = "multinomial",
    seed: int | None = None,
    grid: Sequence | None = None,
    prune_threshold: float = 1e-8,
    c0=Fraction(0),
) -> FilterRun:
    """Filter a whole onset sequence; one estimate per onset."""
    tracker = OnlineTracker(params, prior, n_particles, selection, seed, grid, prune_threshold, c0)
    for k, y in enumerate(onsets.times):
        tracker.push(float(y), onsets.kind(k))
    return FilterRun(tracker.particles, tracker.estimates)


class OnlineTracker:
    """Incremental filter: feed onsets one at a time.

    The state after ``k`` pushes depends only on the first ``k`` onsets and the
    seed, so truncating the input yields a prefix of the output.
    """

    def __init__(self, params, prior, n_particles=10, selection="multinomial", seed=None,
                 grid=None, prune_threshold=1e-8, c0=Fraction(0)):
        if selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}")
        self.params = params
        self.prior = prior
        self.n_particles = n_particles
        self.selection = selection
        self.rng = np.random.default_rng(seed)
        self.grid = grid
        self.prune_threshold = prune_threshold
        self.c0 = frac(c0)
        self.particles: ParticleSet | None = None
        self.estimates: list[FilterEstimate] = []
        self.times: list[float] = []

    def push(self, y: float, kind=EventKind.ONSET) -> dict:
        if self.particles is None:
            self.particles = rbpf_init(self.params, self.prior, y, self.n_particles, kind, self.grid, self.c0)
        else:
            self.particles = rbpf_step(
                self.particles, y, kind, None, self.selection, self.rng, self.n_particles, self.prune_threshold
            )
        self.times.append(y)
        est = filter_estimate(self.particles)
        self.estimates.append(est)
        return self.row(len(self.times) - 1, est)

    def row(self, k: int, est: FilterEstimate) -> dict:
        ps = self.particles
        i = best_index(ps)
        if k == 0:
            gamma_map, c_map = None, ps.c0
        else:
            gamma_map = ps.prior.from_ticks(ps.gamma[i, -1])
            c_map = ps.prior.from_ticks(ps.c[i])
        d = est.delta_mean
        return {
            "k": k,
            "y_k": self.times[k],
            "tau_mean": est.tau_mean,
            "delta_mean": d,
            "omega_mean": math.log2(d) if d > 0 else float("nan"),
            "tau_var": est.tau_var,
            "delta_var": est.delta_var,
            "gamma_map": gamma_map,
            "c_map": c_map,
        }


def refine_reduced(
    candidate: Score,
    supports: Sequence[Sequence],
    onsets: OnsetSequence,
    params: TempoParams,
    prior: ScorePrior,
    mode: str = "ii",
    schedule: Sequence[float] | None = None,
    seed: int | None = None,
    block: int = 1,
) -> Score:
    """Improve a particle MAP on the product of per-slice supports.

    ``mode="ii"`` runs coordinate ascent from ``candidate`` until no block
    changes; ``mode="sa"`` anneals with ``schedule`` and returns the best
    configuration visited (never worse than ``candidate``).
    """
    from . import mcmc

    supports = [tuple(sorted(set(frac(g) for g in s))) for s in supports]
    if len(supports) != len(candidate.gammas):
        raise ValueError("need one support per slice")
    for k, (g, s) in enumerate(zip(candidate.gammas, supports)):
        if g not in s:
            raise ValueError(f"candidate gamma_{k + 1} = {g} is outside its support")
    if all(len(s) == 1 for s in supports):
        return candidate
    if mode == "ii":
        best, _ = mcmc.run_ii(onsets, params, prior, grids=supports, restarts=1, init=candidate, seed=seed, block=block)
    elif mode == "sa":
        best, _ = mcmc.run_sa(
            onsets, params, prior, grids=supports, schedule=schedule or mcmc.linear_schedule(50),
            init=candidate, seed=seed, block=block, reinit_on_converge=False,
        )
    else:
        raise ValueError(f"unknown refinement mode {mode!r}")
    return best
