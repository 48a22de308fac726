"""The switching state-space tempo model.

State ``z = (tau, delta_1, ..., delta_{D-1})``: ``tau`` is the intended onset
time and ``delta_1`` the beat period in seconds.  For ``D >= 3`` the extra
``delta`` components are inertia terms; the next onset advances by
``gamma * (delta_1 + delta_2)`` and the inertia block evolves by the matrix
``a_coeffs``.  Observations see ``tau`` through Gaussian noise whose variance
depends on the event kind.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import lds
from .gaussian import GaussianPotential
from .score import Score, ScorePrior, frac, log_prior_score


class EventKind(enum.IntEnum):
    OFFSET = 0
    ONSET = 1
    OUTLIER = 2


@dataclass(frozen=True)
class TempoParams:
    """Model parameters.  Variances are in seconds squared.

    Defaults follow the maximum-likelihood ``D = 3`` fit reported for
    piano performances (``a = -0.072``, ``R = 0.013^2``, ``q = (0.008^2,
    0.007^2, 0.050^2)``).
    """

    dim: int = 3
    a_coeffs: tuple = (-0.072,)
    Q: tuple = (0.008 ** 2, 0.007 ** 2, 0.050 ** 2)
    R: float = 0.013 ** 2
    R_off: float = 0.1 ** 2
    R_outlier: float = 2.0
    prior_delta_mean: float = 0.5
    prior_delta_var: float = 0.2 ** 2
    prior_tau_var: float = 1e6

    def __post_init__(self):
        D = int(self.dim)
        if D < 2:
            raise ValueError("dim must be at least 2")
        Q = tuple(float(q) for q in np.atleast_1d(self.Q))
        if len(Q) != D:
            raise ValueError(f"Q needs {D} diagonal entries, got {len(Q)}")
        a = tuple(float(x) for x in np.atleast_1d(self.a_coeffs)) if D > 2 else ()
        if len(a) != (D - 2) ** 2:
            raise ValueError(f"a_coeffs needs {(D - 2) ** 2} entries for dim {D}")
        for name in ("R", "R_off", "R_outlier", "prior_delta_var", "prior_tau_var"):
            if not float(getattr(self, name)) > 0:
                raise ValueError(f"{name} must be positive")
        if any(q <= 0 for q in Q):
            raise ValueError("transition variances must be positive")
        if not self.prior_delta_mean > 0:
            raise ValueError("prior_delta_mean must be positive")
        object.__setattr__(self, "dim", D)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "a_coeffs", a)
        for name in ("R", "R_off", "R_outlier", "prior_delta_mean", "prior_delta_var", "prior_tau_var"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def random_walk(cls, **kw) -> "TempoParams":
        """Two-dimensional model ``(tau, delta)``."""
        kw.setdefault("Q", (0.008 ** 2, 0.02 ** 2))
        return cls(dim=2, a_coeffs=(), **kw)

    @property
    def a_block(self) -> np.ndarray:
        m = self.dim - 2
        return np.asarray(self.a_coeffs, dtype=float).reshape(m, m)

    @property
    def q_matrix(self) -> np.ndarray:
        return np.diag(self.Q)

    def replace(self, **kw) -> "TempoParams":
        return replace(self, **kw)

    # --- derived matrices -------------------------------------------------

    @property
    def period_vector(self) -> np.ndarray:
        """Row picking the effective beat period out of the state."""
        v = np.zeros(self.dim)
        v[1] = 1.0
        if self.dim > 2:
            v[2] = 1.0
        return v

    def base_transition(self) -> np.ndarray:
        D = self.dim
        A = np.eye(D)
        if D > 2:
            A[2:, 2:] = self.a_block
        return A

    def gamma_transition(self) -> np.ndarray:
        D = self.dim
        B = np.zeros((D, D))
        B[0] = self.period_vector
        return B

    def prior_cov(self) -> np.ndarray:
        D = self.dim
        P = np.zeros((D, D))
        P[0, 0] = self.prior_tau_var
        P[1, 1] = self.prior_delta_var
        if D > 2:
            P[2:, 2:] = _stationary_cov(self.a_block, np.diag(self.Q[2:]))
        return P

    def prior_mean(self) -> np.ndarray:
        mu = np.zeros(self.dim)
        mu[1] = self.prior_delta_mean
        return mu

    def obs_variance(self, kind: EventKind | int = EventKind.ONSET) -> float:
        kind = EventKind(int(kind))
        if kind == EventKind.ONSET:
            return self.R
        if kind == EventKind.OFFSET:
            return self.R_off
        return self.R_outlier

    def lds_spec(self) -> lds.LdsSpec:
        C = np.zeros((1, self.dim))
        C[0, 0] = 1.0
        return lds.LdsSpec(
            A=self.base_transition(),
            C=C,
            Q=self.q_matrix,
            R=self.R,
            prior_mu=self.prior_mean(),
            prior_cov=self.prior_cov(),
            A_gamma=self.gamma_transition(),
        )

    @classmethod
    def from_lds_spec(cls, spec: lds.LdsSpec, template: "TempoParams") -> "TempoParams":
        D = spec.dim
        a = tuple(spec.A[2:, 2:].ravel()) if D > 2 else ()
        return replace(template, dim=D, a_coeffs=a, Q=tuple(np.diag(spec.Q)), R=float(spec.R[0, 0]))


def _stationary_cov(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Stationary covariance of ``x' = A x + N(0, Q)``; falls back to ``Q`` if unstable."""
    if A.size and np.max(np.abs(np.linalg.eigvals(A))) < 1.0:
        from scipy.linalg import solve_discrete_lyapunov

        S = solve_discrete_lyapunov(A, Q)
        return 0.5 * (S + S.T)
    return Q.copy()


@dataclass(frozen=True)
class OnsetSequence:
    times: np.ndarray
    kinds: tuple | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        if t.size < 1:
            raise ValueError("an onset sequence needs at least one event")
        if not np.all(np.isfinite(t)):
            raise ValueError("onset times must be finite")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        if self.kinds is not None:
            kinds = tuple(EventKind(int(u)) for u in self.kinds)
            if len(kinds) != t.size:
                raise ValueError("one indicator per event")
            object.__setattr__(self, "kinds", kinds)

    def __len__(self):
        return self.times.size

    def kind(self, k: int) -> EventKind:
        return EventKind.ONSET if self.kinds is None else self.kinds[k]

    def obs_variances(self, params: TempoParams) -> np.ndarray:
        return np.array([params.obs_variance(self.kind(k)) for k in range(len(self))])

    def prefix(self, n: int) -> "OnsetSequence":
        return OnsetSequence(self.times[:n], None if self.kinds is None else self.kinds[:n])


def transition_matrix(gamma, params: TempoParams) -> np.ndarray:
    g = frac(gamma) if not isinstance(gamma, float) else gamma
    if g < 0:
        raise ValueError("gamma must be non-negative")
    return params.base_transition() + float(g) * params.gamma_transition()


def observe_potential(y_k: float, kind: EventKind | int, params: TempoParams) -> GaussianPotential:
    """``p(y_k | tau_k)`` as a potential on ``tau`` (label ``0``)."""
    r = params.obs_variance(kind)
    return GaussianPotential(
        [y_k / r], [[1.0 / r]], -0.5 * math.log(2 * math.pi * r) - 0.5 * y_k * y_k / r, (0,)
    )


NOISE_MODES = ("full", "zeta_tau_zero", "noiseless")


def simulate(
    score: Score,
    params: TempoParams,
    noise: str = "full",
    seed: int | None = None,
    forced_delta: Sequence[float] | None = None,
    kinds: Sequence[int] | None = None,
    tau0: float = 0.0,
):
    """Draw onset times for ``score``.

    ``forced_delta`` pins the beat period sequence ``delta_0, delta_1, ...``
    (length ``K`` or ``K + 1``); the inertia components are then zero.
    Returns ``(OnsetSequence, z)`` with ``z`` of shape ``(K + 1, D)``.
    """
    if noise not in NOISE_MODES:
        raise ValueError(f"noise must be one of {NOISE_MODES}")
    rng = np.random.default_rng(seed)
    K = len(score.gammas)
    D = params.dim
    kinds_t = None if kinds is None else tuple(EventKind(int(u)) for u in kinds)
    if kinds_t is not None and len(kinds_t) != K + 1:
        raise ValueError("need one event kind per onset")
    state_noise = noise != "noiseless"
    sd_q = np.sqrt(np.asarray(params.Q))
    if noise == "zeta_tau_zero":
        sd_q = sd_q.copy()
        sd_q[0] = 0.0
    z = np.zeros((K + 1, D))
    z[0, 0] = tau0
    if forced_delta is not None:
        fd = np.asarray(forced_delta, dtype=float)
        if fd.size not in (K, K + 1):
            raise ValueError(f"forced_delta needs {K} or {K + 1} values")
        if fd.size == K:
            fd = np.append(fd, fd[-1] if K else params.prior_delta_mean)
        z[:, 1] = fd
        for k in range(1, K + 1):
            z[k, 0] = z[k - 1, 0] + float(score.gammas[k - 1]) * z[k - 1, 1]
            if state_noise:
                z[k, 0] += sd_q[0] * rng.standard_normal()
    else:
        mu0 = params.prior_mean()
        P0 = params.prior_cov()
        z[0, 1:] = mu0[1:]
        if state_noise:
            L = np.linalg.cholesky(P0[1:, 1:])
            z[0, 1:] += L @ rng.standard_normal(D - 1)
        for k in range(1, K + 1):
            A = transition_matrix(score.gammas[k - 1], params)
            z[k] = A @ z[k - 1]
            if state_noise:
                z[k] += sd_q * rng.standard_normal(D)
    r = np.array([params.obs_variance(EventKind.ONSET if kinds_t is None else kinds_t[k]) for k in range(K + 1)])
    eps = np.sqrt(r) * rng.standard_normal(K + 1) if noise != "noiseless" else np.zeros(K + 1)
    y = z[:, 0] + eps
    return OnsetSequence(y, kinds_t), z


def predictive_loglik(mu, P, y_k: float, grid: Sequence, params: TempoParams, kind=EventKind.ONSET) -> np.ndarray:
    """``log p(y_k | gamma, filtered state)`` for every ``gamma`` in ``grid``."""
    A = params.lds_spec().transitions([float(g) for g in grid])
    n = len(grid)
    mu_b = np.broadcast_to(mu, (n, params.dim))
    P_b = np.broadcast_to(P, (n, params.dim, params.dim))
    mu_p, P_p = lds.kf_predict(mu_b, P_b, A, params.q_matrix)
    s = P_p[:, 0, 0] + params.obs_variance(kind)
    e = y_k - mu_p[:, 0]
    return -0.5 * (math.log(2 * math.pi) + np.log(s) + e * e / s)


def candidate_gammas(
    pred: GaussianPotential,
    y_k: float,
    grid: Sequence,
    params: TempoParams,
    mass_threshold: float = 1e-8,
    kind=EventKind.ONSET,
) -> tuple:
    """Grid values whose one-step predictive likelihood is within
    ``mass_threshold`` of the best one.  ``pred`` is the filtered potential on
    the previous state."""
    grid = tuple(grid)
    if not grid:
        raise ValueError("empty gamma grid")
    mu, P, _ = pred.to_moments()
    ll = predictive_loglik(mu, P, y_k, grid, params, kind)
    keep = candidate_mask(ll, mass_threshold)
    return tuple(g for g, m in zip(grid, keep) if m)


def candidate_mask(ll: np.ndarray, mass_threshold: float) -> np.ndarray:
    best = np.max(ll, axis=-1, keepdims=True)
    if mass_threshold <= 0:
        return np.ones_like(ll, dtype=bool)
    return ll >= best + math.log(mass_threshold)


def clamped_log_likelihood(gammas: Sequence, onsets: OnsetSequence, params: TempoParams) -> float:
    """``log p(y | gamma)`` by a Kalman filter with the score clamped."""
    spec = params.lds_spec()
    A_seq = spec.transitions([float(g) for g in gammas])
    return lds.kalman_loglik(spec, A_seq, onsets.times, onsets.obs_variances(params))


def log_joint(score: Score, onsets: OnsetSequence, params: TempoParams, prior: ScorePrior) -> float:
    """``log p(gamma, y)``: clamped likelihood plus score prior."""
    if len(score.gammas) != len(onsets) - 1:
        raise ValueError("score length must be one less than the number of onsets")
    return clamped_log_likelihood(score.gammas, onsets, params) + log_prior_score(score, prior)


def filtered_trajectory(gammas: Sequence, onsets: OnsetSequence, params: TempoParams):
    """Filtered means and variances of ``(tau, period)`` under a clamped score."""
    spec = params.lds_spec()
    r = onsets.obs_variances(params)
    c = spec.C[0]
    v = params.period_vector
    mu, P = spec.prior_mu, spec.prior_cov
    rows = []
    for k, y in enumerate(onsets.times):
        if k:
            mu, P = lds.kf_predict(mu, P, spec.transition(float(gammas[k - 1])), spec.Q)
        mu, P, _ = lds.kf_update(mu, P, np.float64(y), np.float64(r[k]), c)
        rows.append((mu[0], v @ mu, P[0, 0], v @ P @ v))
    return np.array(rows)


def detect_outliers(score: Score, onsets: OnsetSequence, params: TempoParams, max_sweeps: int = 20):
    """MAP outlier indicators with the score known.

    Indicators are a-priori independent and uniform; an outlier sees variance
    ``R_outlier`` instead of ``R``.  A greedy forward pass picks each
    indicator given the past, then coordinate ascent over the full sequence
    polishes the result.  Returns a boolean array (True = outlier).
    """
    spec = params.lds_spec()
    A_seq = spec.transitions([float(g) for g in score.gammas])
    y = onsets.times
    K = len(y)
    c = spec.C[0]
    r_variants = np.array([params.R, params.R_outlier])
    flags = np.zeros(K, dtype=bool)
    mu, P = spec.prior_mu, spec.prior_cov
    for k in range(K):
        if k:
            mu, P = lds.kf_predict(mu, P, A_seq[k - 1], spec.Q)
        mu2, P2, ll = lds.kf_update(
            np.broadcast_to(mu, (2, params.dim)), np.broadcast_to(P, (2, params.dim, params.dim)),
            np.full(2, y[k]), r_variants, c,
        )
        j = int(np.argmax(ll))
        flags[k] = bool(j)
        mu, P = mu2[j], P2[j]

    def total(f):
        return lds.kalman_loglik(spec, A_seq, y, np.where(f, params.R_outlier, params.R))

    best = total(flags)
    for _ in range(max_sweeps):
        changed = False
        for k in range(K):
            f = flags.copy()
            f[k] = ~f[k]
            val = total(f)
            if val > best:
                flags, best, changed = f, val, True
        if not changed:
            break
    return flags
