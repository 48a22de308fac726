"""Inference in a linear dynamical system with a fixed (possibly switching) transition.

Two families of routines live here:

* ``forward_pass`` / ``backward_pass`` / ``smooth`` run the canonical-form
  message recursions and hand back :class:`GaussianPotential` messages.  They
  are the reference implementation and are used by tests as an oracle.
* ``kf_predict`` / ``kf_update`` / ``kalman_loglik`` are batched moment-form
  kernels.  The particle filter and the Gibbs sampler evaluate thousands of
  one-step extensions per observation and go through these.

Slices are indexed from 0.  ``A_seq[j]`` maps ``z_j`` to ``z_{j+1}``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import cost
from .gaussian import LOG_2PI, GaussianPotential, ImproperPotentialError

log = logging.getLogger(__name__)


class LdsError(ValueError):
    pass


@dataclass(frozen=True)
class LdsSpec:
    """Linear-Gaussian model ``z_{j+1} = A_j z_j + noise``, ``y_j = C z_j + noise``.

    The transition may switch with a per-step scalar ``gamma``:
    ``A_j = A + gamma_j * A_gamma``.  With ``A_gamma`` zero the model has a
    constant transition.
    """

    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: float
    prior_mu: np.ndarray
    prior_cov: np.ndarray
    A_gamma: Optional[np.ndarray] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        D = A.shape[0]
        if A.shape != (D, D):
            raise LdsError("A must be square")
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if C.shape[1] != D:
            raise LdsError(f"C has {C.shape[1]} columns, state dimension is {D}")
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        mu = np.atleast_1d(np.asarray(self.prior_mu, dtype=float))
        P = np.atleast_2d(np.asarray(self.prior_cov, dtype=float))
        if Q.shape != (D, D) or P.shape != (D, D) or mu.shape != (D,):
            raise LdsError("Q, prior_cov and prior_mu must match the state dimension")
        B = np.zeros((D, D)) if self.A_gamma is None else np.atleast_2d(np.asarray(self.A_gamma, dtype=float))
        if B.shape != (D, D):
            raise LdsError("A_gamma must match A")
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if R.shape != (C.shape[0], C.shape[0]):
            raise LdsError("R must match the observation dimension")
        for name, val in (("A", A), ("C", C), ("Q", Q), ("R", R), ("prior_mu", mu), ("prior_cov", P), ("A_gamma", B)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "prior_mu", mu)
        object.__setattr__(self, "prior_cov", P)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]

    def transition(self, gamma: float = 0.0) -> np.ndarray:
        return self.A + float(gamma) * self.A_gamma

    def transitions(self, gammas: Sequence[float]) -> np.ndarray:
        g = np.asarray(gammas, dtype=float).reshape(-1, 1, 1)
        return self.A[None] + g * self.A_gamma[None]

    def with_(self, **kw) -> "LdsSpec":
        return replace(self, **kw)


@dataclass
class MessageSet:
    """Canonical messages of one sequence.

    ``alpha_pred[j]`` is p(y_{<j}, z_j); ``alpha_filt[j]`` is p(y_{<=j}, z_j);
    ``beta[j]`` is p(y_{>j} | z_j) and ``beta_filt[j]`` is p(y_{>=j} | z_j).
    Backward messages may be improper.
    """

    alpha_pred: list = field(default_factory=list)
    alpha_filt: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    beta_filt: list = field(default_factory=list)
    log_likelihood: float = float("nan")

    def __len__(self):
        return max(len(self.alpha_filt), len(self.beta))


def _prep(spec: LdsSpec, A_seq, y, R_seq):
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    K = y.shape[0]
    if K < 1:
        raise LdsError("need at least one observation")
    if y.shape[1] != spec.obs_dim:
        raise LdsError("observation dimension does not match C")
    if A_seq is None:
        A_seq = np.broadcast_to(spec.A, (max(K - 1, 0), spec.dim, spec.dim))
    else:
        A_seq = np.asarray(A_seq, dtype=float)
        if A_seq.ndim == 2:
            A_seq = np.broadcast_to(A_seq, (max(K - 1, 0),) + A_seq.shape)
        if A_seq.shape != (K - 1, spec.dim, spec.dim):
            raise LdsError(f"A_seq must have shape {(K - 1, spec.dim, spec.dim)}, got {A_seq.shape}")
    if R_seq is None:
        R_seq = np.broadcast_to(spec.R, (K,) + spec.R.shape)
    else:
        R_seq = np.asarray(R_seq, dtype=float).reshape(K, spec.obs_dim, spec.obs_dim)
    return A_seq, y, R_seq


def _labels(D):
    return tuple(range(D))


def observation_potential(spec: LdsSpec, y, R=None) -> GaussianPotential:
    """``p(y = yhat | z)`` as a potential on the state."""
    R = spec.R if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    Ri = np.linalg.inv(R)
    C = spec.C
    _, logdet = np.linalg.slogdet(2 * math.pi * R)
    return GaussianPotential(C.T @ Ri @ y, C.T @ Ri @ C, -0.5 * logdet - 0.5 * float(y @ Ri @ y), _labels(spec.dim))


def prior_potential(spec: LdsSpec) -> GaussianPotential:
    return GaussianPotential.from_moments(spec.prior_mu, spec.prior_cov, 0.0, _labels(spec.dim))


def forward_pass(spec: LdsSpec, A_seq, y, R_seq=None) -> tuple[MessageSet, float]:
    """Forward (alpha) recursion in canonical form.

    Returns the messages and ``log p(y_{0:K-1})``.
    """
    A_seq, y, R_seq = _prep(spec, A_seq, y, R_seq)
    K = y.shape[0]
    Q = spec.Q
    Qi = np.linalg.inv(Q)
    _, logdet_2piQ = np.linalg.slogdet(2 * math.pi * Q)
    msgs = MessageSet()
    pred = prior_potential(spec)
    for j in range(K):
        msgs.alpha_pred.append(pred)
        filt = pred.multiply(observation_potential(spec, y[j], R_seq[j]))
        msgs.alpha_filt.append(filt)
        if j == K - 1:
            break
        A = A_seq[j]
        h, Kf, g = filt.h, filt.K, filt.g
        try:
            M = np.linalg.inv(A.T @ Qi @ A + Kf)
        except np.linalg.LinAlgError:
            raise ImproperPotentialError(f"singular prediction at slice {j}") from None
        QiA = Qi @ A
        _, logdet_2piM = np.linalg.slogdet(2 * math.pi * M)
        pred = GaussianPotential(
            QiA @ M @ h,
            Qi - QiA @ M @ QiA.T,
            g - 0.5 * logdet_2piQ + 0.5 * logdet_2piM + 0.5 * float(h @ M @ h),
            filt.labels,
        )
    try:
        ll = msgs.alpha_filt[-1].log_integral()
    except ImproperPotentialError as exc:
        raise ImproperPotentialError(f"filtered potential is improper: {exc}") from None
    msgs.log_likelihood = ll
    return msgs, ll


def backward_canonical(spec: LdsSpec, A_seq, y, R_seq=None):
    """Backward recursion on raw arrays.

    Returns ``(h, K, g)`` for ``beta_{j|j+1}`` and ``(hf, Kf, gf)`` for
    ``beta_{j|j}``, each stacked over slices.  ``beta_{K-1|K}`` is flat.
    """
    A_seq, y, R_seq = _prep(spec, A_seq, y, R_seq)
    n = y.shape[0]
    D = spec.dim
    Q = spec.Q
    Qi = np.linalg.inv(Q)
    _, logdet_2piQ = np.linalg.slogdet(2 * math.pi * Q)
    C = spec.C
    h = np.zeros((n, D))
    Km = np.zeros((n, D, D))
    g = np.zeros(n)
    hf = np.zeros((n, D))
    Kf = np.zeros((n, D, D))
    gf = np.zeros(n)
    for j in range(n - 1, -1, -1):
        R = R_seq[j]
        Ri = np.linalg.inv(R)
        _, logdet_2piR = np.linalg.slogdet(2 * math.pi * R)
        hf[j] = C.T @ Ri @ y[j] + h[j]
        Kf[j] = C.T @ Ri @ C + Km[j]
        gf[j] = g[j] - 0.5 * logdet_2piR - 0.5 * float(y[j] @ Ri @ y[j])
        if j == 0:
            break
        AtQi = A_seq[j - 1].T @ Qi
        Ms = np.linalg.inv(Qi + Kf[j])
        _, logdet_2piM = np.linalg.slogdet(2 * math.pi * Ms)
        Knew = AtQi @ (Q - Ms) @ AtQi.T
        h[j - 1] = AtQi @ Ms @ hf[j]
        Km[j - 1] = 0.5 * (Knew + Knew.T)
        g[j - 1] = gf[j] - 0.5 * logdet_2piQ + 0.5 * logdet_2piM + 0.5 * float(hf[j] @ Ms @ hf[j])
    cost.add(n)
    return (h, Km, g), (hf, Kf, gf)


def backward_pass(spec: LdsSpec, A_seq, y, R_seq=None) -> tuple[MessageSet, float]:
    """Backward (beta) recursion in canonical form, starting from a flat message."""
    (h, Km, g), (hf, Kf, gf) = backward_canonical(spec, A_seq, y, R_seq)
    labels = _labels(spec.dim)
    msgs = MessageSet(
        beta=[GaussianPotential(h[j], Km[j], g[j], labels) for j in range(len(g))],
        beta_filt=[GaussianPotential(hf[j], Kf[j], gf[j], labels) for j in range(len(g))],
    )
    ll = prior_potential(spec).multiply(msgs.beta_filt[0]).log_integral()
    msgs.log_likelihood = ll
    return msgs, ll


def two_pass(spec: LdsSpec, A_seq, y, R_seq=None) -> MessageSet:
    fwd, ll = forward_pass(spec, A_seq, y, R_seq)
    bwd, _ = backward_pass(spec, A_seq, y, R_seq)
    fwd.beta = bwd.beta
    fwd.beta_filt = bwd.beta_filt
    return fwd


def smooth(msgs: MessageSet, k: int) -> GaussianPotential:
    """``alpha_{k|k} * beta_{k|k+1}``: the smoothed marginal scaled by p(y)."""
    if not msgs.alpha_filt or not msgs.beta:
        raise LdsError("smoothing needs both forward and backward messages")
    if not 0 <= k < len(msgs.alpha_filt):
        raise IndexError(f"slice {k} out of range")
    return msgs.alpha_filt[k].multiply(msgs.beta[k])


# ---------------------------------------------------------------------------
# batched moment-form kernels


def kf_predict(mu, P, A, Q):
    """Push ``N(mu, P)`` through ``z' = A z + N(0, Q)``; batched over leading axes."""
    cost.add(mu.shape[0] if mu.ndim > 1 else 1)
    mu_n = np.einsum("...ij,...j->...i", A, mu)
    P_n = A @ P @ np.swapaxes(A, -1, -2) + Q
    return mu_n, P_n


def _unit_index(c):
    nz = np.flatnonzero(c)
    return int(nz[0]) if nz.size == 1 and c[nz[0]] == 1.0 else None


def kf_update(mu, P, y, r, c):
    """Condition on the scalar observation ``y = c.z + N(0, r)``.

    Returns the posterior moments and ``log N(y; c.mu, c'Pc + r)``.
    """
    Pc = P @ c
    s = Pc @ c + r
    e = y - mu @ c
    gain = Pc / s[..., None]
    mu_n = mu + gain * e[..., None]
    P_n = P - gain[..., :, None] * Pc[..., None, :]
    i = _unit_index(c)
    if i is not None:
        # the observed coordinate cancels badly under a near-flat prior;
        # P_n c = Pc r / s and c.mu_n = y - e r / s hold exactly
        shrink = (r / s)[..., None]
        col = Pc * shrink
        P_n[..., :, i] = col
        P_n[..., i, :] = col
        mu_n[..., i] = y - e * (r / s)
    P_n = 0.5 * (P_n + np.swapaxes(P_n, -1, -2))
    ll = -0.5 * (LOG_2PI + np.log(s) + e * e / s)
    return mu_n, P_n, ll


def kalman_loglik(spec: LdsSpec, A_seq, y, r_seq=None) -> float:
    """Moment-form filter log-likelihood for a scalar-observation model."""
    if spec.obs_dim != 1:
        raise LdsError("kalman_loglik handles scalar observations only")
    y = np.asarray(y, dtype=float).ravel()
    K = y.shape[0]
    r_seq = np.full(K, float(spec.R[0, 0])) if r_seq is None else np.asarray(r_seq, dtype=float)
    c = spec.C[0]
    mu, P = spec.prior_mu, spec.prior_cov
    total = 0.0
    for j in range(K):
        if j:
            mu, P = kf_predict(mu, P, A_seq[j - 1], spec.Q)
        mu, P, ll = kf_update(mu, P, np.float64(y[j]), np.float64(r_seq[j]), c)
        total += float(ll)
    return total


def potential_from_moments(mu, P, log_z, labels=None) -> GaussianPotential:
    return GaussianPotential.from_moments(mu, P, log_z, labels if labels is not None else _labels(len(mu)))


# ---------------------------------------------------------------------------
# EM


@dataclass
class EmSequence:
    """One training sequence: scalar observations and the clamped switch values."""

    y: np.ndarray
    gammas: Optional[np.ndarray] = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.gammas is not None:
            self.gammas = np.asarray(self.gammas, dtype=float).ravel()
            if self.gammas.shape[0] != self.y.shape[0] - 1:
                raise LdsError("need one gamma per transition (len(y) - 1)")


@dataclass
class EmResult:
    spec: LdsSpec
    log_likelihoods: list
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.log_likelihoods)


def _e_step(spec: LdsSpec, seqs: list[EmSequence]):
    """Batched RTS smoother.  Returns sufficient statistics and log-likelihood."""
    D = spec.dim
    c = spec.C[0]
    r = float(spec.R[0, 0])
    stats = {
        "S_next": [], "S_cross": [], "S_prev": [], "gamma": [],
        "obs_err": 0.0, "n_obs": 0,
    }
    total_ll = 0.0
    by_len: dict[int, list[EmSequence]] = {}
    for s in seqs:
        by_len.setdefault(len(s.y), []).append(s)
    for T, group in sorted(by_len.items()):
        B = len(group)
        Y = np.stack([s.y for s in group])  # (B, T)
        G = np.stack([s.gammas if s.gammas is not None else np.zeros(T - 1) for s in group]) if T > 1 else np.zeros((B, 0))
        A = spec.A[None, None] + G[..., None, None] * spec.A_gamma[None, None]  # (B, T-1, D, D)
        mu_f = np.empty((B, T, D))
        P_f = np.empty((B, T, D, D))
        mu_p = np.empty((B, T, D))
        P_p = np.empty((B, T, D, D))
        mu = np.broadcast_to(spec.prior_mu, (B, D)).copy()
        P = np.broadcast_to(spec.prior_cov, (B, D, D)).copy()
        for t in range(T):
            if t:
                mu, P = kf_predict(mu, P, A[:, t - 1], spec.Q)
            mu_p[:, t], P_p[:, t] = mu, P
            mu, P, ll = kf_update(mu, P, Y[:, t], np.full(B, r), c)
            total_ll += float(ll.sum())
            mu_f[:, t], P_f[:, t] = mu, P
        mu_s = mu_f.copy()
        P_s = P_f.copy()
        cross = np.empty((B, max(T - 1, 0), D, D))  # Cov(z_{t+1}, z_t | y)
        for t in range(T - 2, -1, -1):
            At = A[:, t]
            J = P_f[:, t] @ np.swapaxes(At, -1, -2) @ np.linalg.inv(P_p[:, t + 1])
            mu_s[:, t] = mu_f[:, t] + np.einsum("bij,bj->bi", J, mu_s[:, t + 1] - mu_p[:, t + 1])
            P_s[:, t] = P_f[:, t] + J @ (P_s[:, t + 1] - P_p[:, t + 1]) @ np.swapaxes(J, -1, -2)
            cross[:, t] = P_s[:, t + 1] @ np.swapaxes(J, -1, -2)
        second = P_s + mu_s[..., :, None] * mu_s[..., None, :]
        pred_y = mu_s @ c
        var_y = np.einsum("i,btij,j->bt", c, P_s, c)
        stats["obs_err"] += float(np.sum((Y - pred_y) ** 2 + var_y))
        stats["n_obs"] += B * T
        if T > 1:
            stats["S_next"].append(second[:, 1:].reshape(-1, D, D))
            stats["S_prev"].append(second[:, :-1].reshape(-1, D, D))
            sc = cross + mu_s[:, 1:, :, None] * mu_s[:, :-1, None, :]
            stats["S_cross"].append(sc.reshape(-1, D, D))
            stats["gamma"].append(G.reshape(-1))
    for key in ("S_next", "S_cross", "S_prev"):
        stats[key] = np.concatenate(stats[key]) if stats[key] else np.zeros((0, D, D))
    stats["gamma"] = np.concatenate(stats["gamma"]) if stats["gamma"] else np.zeros(0)
    return stats, total_ll


def _residual_second_moment(stats, A_all):
    """Per-transition ``E[(z' - A z)(z' - A z)^T]``."""
    Sn, Sc, Sp = stats["S_next"], stats["S_cross"], stats["S_prev"]
    At = np.swapaxes(A_all, -1, -2)
    return Sn - A_all @ np.swapaxes(Sc, -1, -2) - Sc @ At + A_all @ Sp @ At


def _m_step(spec: LdsSpec, stats, structure: str, free: set) -> LdsSpec:
    D = spec.dim
    n_tr = stats["S_next"].shape[0]
    new = {}
    if "R" in free:
        R = stats["obs_err"] / stats["n_obs"]
        if not R > 0:
            raise LdsError("degenerate observation statistics")
        new["R"] = np.array([[R]])
    if n_tr == 0:
        return spec.with_(**new)
    g = stats["gamma"]
    Sp_sum = stats["S_prev"].sum(0)
    A = spec.A.copy()
    if "A" in free:
        if structure == "template":
            idx = list(range(2, D))
            if idx:
                M = Sp_sum[np.ix_(idx, idx)]
                rhs = stats["S_cross"].sum(0)[np.ix_(idx, idx)]  # rows: z'_j, cols: z_l
                try:
                    A[np.ix_(idx, idx)] = np.linalg.solve(M, rhs.T).T
                except np.linalg.LinAlgError:
                    raise LdsError("degenerate sufficient statistics for A") from None
        else:
            target = stats["S_cross"] - g[:, None, None] * (spec.A_gamma[None] @ stats["S_prev"])
            try:
                A = np.linalg.solve(Sp_sum, target.sum(0).T).T
            except np.linalg.LinAlgError:
                raise LdsError("degenerate sufficient statistics for A") from None
        new["A"] = A
    if "Q" in free:
        A_all = A[None] + g[:, None, None] * spec.A_gamma[None]
        W = _residual_second_moment(stats, A_all).sum(0) / n_tr
        W = 0.5 * (W + W.T)
        Q = np.diag(np.diag(W)) if structure == "template" else W
        if np.any(np.diag(Q) <= 0):
            raise LdsError("degenerate sufficient statistics for Q")
        new["Q"] = Q
    return spec.with_(**new)


def em_fit(
    dataset: Sequence[EmSequence],
    init: LdsSpec,
    structure: str = "template",
    free: Sequence[str] = ("A", "Q", "R"),
    max_iter: int = 200,
    tol: float = 1e-7,
) -> EmResult:
    """Maximum-likelihood ``A``, ``Q``, ``R`` by EM with the switch values clamped.

    ``structure="template"`` keeps the higher-order tempo template: only the
    block acting on the inertia variables (index 2 onwards) is free and ``Q``
    stays diagonal.  ``structure="generic"`` frees the whole constant part of
    ``A`` and a full ``Q``.  The initial-state prior is held fixed.
    """
    seqs = [s if isinstance(s, EmSequence) else EmSequence(*s) for s in dataset]
    if not seqs:
        raise LdsError("empty dataset")
    if init.obs_dim != 1:
        raise LdsError("em_fit supports scalar observations")
    if structure not in ("template", "generic"):
        raise LdsError(f"unknown structure {structure!r}")
    free = set(free)
    spec = init
    history: list[float] = []
    converged = False
    for it in range(max_iter):
        stats, ll = _e_step(spec, seqs)
        history.append(ll)
        if len(history) > 1 and history[-1] - history[-2] < tol:
            converged = True
            break
        spec_next = _m_step(spec, stats, structure, free)
        spec = spec_next
    else:
        _, ll = _e_step(spec, seqs)
        history.append(ll)
    if len(history) > 1 and history[-1] < history[-2]:
        log.warning("EM log-likelihood decreased by %.3g", history[-2] - history[-1])
    return EmResult(spec, history, converged)
