"""Shared oracles.

The dense-Gaussian oracle builds the joint distribution of all states and
observations explicitly and never runs a recursion, so it is independent of
the filtering code it checks.
"""
import itertools
import math
from fractions import Fraction

import mpmath as mp
import numpy as np
import pytest
from scipy.stats import multivariate_normal

from tempoquant.score import ScorePrior, Score, log_prior_score
from tempoquant.tempo import OnsetSequence, TempoParams, transition_matrix


def dense_joint(A_seq, C, Q, R_seq, mu0, P0):
    """Mean and covariance of ``(z_0..z_{n-1}, y_0..y_{n-1})`` stacked."""
    n = len(A_seq) + 1
    D = mu0.shape[0]
    m = C.shape[0]
    # z = T @ [z_0, w_1, ..., w_{n-1}]
    T = np.zeros((n * D, n * D))
    T[:D, :D] = np.eye(D)
    for k in range(1, n):
        T[k * D:(k + 1) * D] = A_seq[k - 1] @ T[(k - 1) * D:k * D]
        T[k * D:(k + 1) * D, k * D:(k + 1) * D] += np.eye(D)
    src_cov = np.zeros((n * D, n * D))
    src_cov[:D, :D] = P0
    for k in range(1, n):
        src_cov[k * D:(k + 1) * D, k * D:(k + 1) * D] = Q
    src_mu = np.zeros(n * D)
    src_mu[:D] = mu0
    z_mu = T @ src_mu
    z_cov = T @ src_cov @ T.T
    Cb = np.kron(np.eye(n), C)
    Rb = np.zeros((n * m, n * m))
    for k in range(n):
        Rb[k * m:(k + 1) * m, k * m:(k + 1) * m] = R_seq[k]
    mu = np.concatenate([z_mu, Cb @ z_mu])
    cov = np.block([[z_cov, z_cov @ Cb.T], [Cb @ z_cov, Cb @ z_cov @ Cb.T + Rb]])
    return mu, cov


def dense_loglik(A_seq, C, Q, R_seq, mu0, P0, y):
    y = np.asarray(y, dtype=float).reshape(len(A_seq) + 1, -1)
    mu, cov = dense_joint(A_seq, C, Q, R_seq, mu0, P0)
    nz = (len(A_seq) + 1) * mu0.shape[0]
    return multivariate_normal(mu[nz:], cov[nz:, nz:]).logpdf(y.ravel())


def dense_filtered(A_seq, C, Q, R_seq, mu0, P0, y):
    """Moments of ``z_last | y_all`` and ``log p(y_all)`` by Gaussian conditioning."""
    y = np.asarray(y, dtype=float).reshape(len(A_seq) + 1, -1)
    mu, cov = dense_joint(A_seq, C, Q, R_seq, mu0, P0)
    D = mu0.shape[0]
    n = len(A_seq) + 1
    nz = n * D
    zi = slice((n - 1) * D, n * D)
    Syy = cov[nz:, nz:]
    Szy = cov[zi, nz:]
    gain = np.linalg.solve(Syy, Szy.T).T
    m = mu[zi] + gain @ (y.ravel() - mu[nz:])
    P = cov[zi, zi] - gain @ Szy.T
    return m, P, multivariate_normal(mu[nz:], Syy).logpdf(y.ravel())


def tempo_dense(gammas, onsets: OnsetSequence, params: TempoParams, upto=None):
    """Filtered moments of the last state and ``log p(y)`` for the tempo model.

    Builds the covariance of ``(z_last, y_0..y_n)`` in 40-digit arithmetic.
    The pseudo-flat tau prior makes the float version too ill-conditioned to
    serve as a 1e-9 reference.
    """
    n = len(gammas) + 1 if upto is None else upto + 1
    spec = params.lds_spec()
    D = spec.dim
    with mp.workdps(40):
        A = [mp.matrix(transition_matrix(g, params).tolist()) for g in gammas[:n - 1]]
        Q = mp.matrix(spec.Q.tolist())
        Z = [mp.matrix(spec.prior_cov.tolist())]
        M = [mp.matrix(spec.prior_mu.tolist())]
        for a in A:
            Z.append(a * Z[-1] * a.T + Q)
            M.append(a * M[-1])

        def phi(i, j):
            X = mp.eye(D)
            for k in range(i, j):
                X = A[k] * X
            return X

        r = onsets.obs_variances(params)[:n]
        Syy = mp.matrix(n, n)
        Szy = mp.matrix(D, n)
        last = n - 1
        for i in range(n):
            for j in range(n):
                lo, hi = min(i, j), max(i, j)
                Syy[i, j] = (phi(lo, hi) * Z[lo])[0, 0] + (mp.mpf(r[i]) if i == j else 0)
            col = phi(i, last) * Z[i]
            for d in range(D):
                Szy[d, i] = col[d, 0]
        e = mp.matrix([mp.mpf(float(onsets.times[i])) - M[i][0] for i in range(n)])
        Si = mp.inverse(Syy)
        ll = -(n * mp.log(2 * mp.pi) + mp.log(mp.det(Syy)) + (e.T * Si * e)[0]) / 2
        m = M[last] + Szy * Si * e
        P = Z[last] - Szy * Si * Szy.T
        return (np.array([float(v) for v in m]), np.array([[float(P[i, j]) for j in range(D)] for i in range(D)]),
                float(ll))


def enumerate_joint(onsets, params, prior, grid, upto=None):
    """``{gammas: (log p(gammas, y), filtered mean, filtered cov)}`` over every trajectory."""
    K = len(onsets) - 1 if upto is None else upto
    out = {}
    for gam in itertools.product(grid, repeat=K):
        m, P, ll = tempo_dense(list(gam), onsets, params, upto=K)
        lp = log_prior_score(Score(gam), prior)
        out[gam] = (ll + lp, m, P)
    return out


def random_tempo_problem(rng, K, grid_size=2, dim=2):
    """Small random switching problem: onsets simulated from a random grid score."""
    pool = [Fraction(1, 2), Fraction(1), Fraction(3, 2), Fraction(1, 4), Fraction(3, 4), Fraction(2)]
    idx = rng.choice(len(pool), size=grid_size, replace=False)
    grid = tuple(sorted(pool[i] for i in idx))
    if dim == 2:
        params = TempoParams.random_walk(R=float(rng.uniform(0.01, 0.05)) ** 2,
                                         Q=(float(rng.uniform(0.005, 0.02)) ** 2, float(rng.uniform(0.01, 0.05)) ** 2))
    else:
        params = TempoParams(R=float(rng.uniform(0.01, 0.05)) ** 2)
    gam = [grid[i] for i in rng.integers(0, grid_size, size=K)]
    delta = 0.5
    t = [0.0]
    for g in gam:
        t.append(t[-1] + float(g) * delta * float(rng.uniform(0.9, 1.1)))
    y = np.array(t) + rng.normal(0, math.sqrt(params.R), K + 1)
    prior = ScorePrior(gamma_grid=grid)
    return OnsetSequence(y), params, prior, grid


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
