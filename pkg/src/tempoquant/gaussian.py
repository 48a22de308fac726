"""Unnormalized Gaussian potentials in canonical form.

A potential ``phi(x) = exp(g + h'x - x'Kx/2)`` is stored as ``[h, K, g]``
together with an ordered tuple of labels naming each dimension.  Labels
make products across time slices line up without positional bookkeeping:
multiplying a potential on ``("z0",)`` with one on ``("z0", "z1")`` extends
the first with zeros on ``z1``.

Everything is kept in the log domain; ``g`` carries the log scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

#: Smallest Cholesky pivot (squared) accepted as positive definite.
PIVOT_TOL = 1e-12


class PotentialError(ValueError):
    """Base class for errors raised by potential algebra."""


class SingularCovarianceError(PotentialError):
    pass


class ImproperPotentialError(PotentialError):
    """The potential (or an eliminated block) is not integrable."""


class LabelError(PotentialError, KeyError):
    pass


def cholesky_pd(K: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of ``K``; raises if ``K`` is not positive definite."""
    K = np.asarray(K, dtype=float)
    if K.size == 0:
        return K.reshape(0, 0)
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        raise ImproperPotentialError(f"{what} is not positive definite") from None
    if np.min(np.diag(L)) ** 2 < PIVOT_TOL:
        raise ImproperPotentialError(f"{what} is numerically singular")
    return L


def _cholesky_cov(sigma: np.ndarray) -> np.ndarray:
    # relative pivot test: covariances such as 1e-12 are legitimate
    try:
        L = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("covariance is not invertible") from None
    d = np.diag(L) ** 2
    if np.min(d) <= PIVOT_TOL * float(np.max(np.abs(sigma))) * 1e-6:
        raise SingularCovarianceError("covariance is numerically singular")
    return L


def _chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    from scipy.linalg import cho_solve

    return cho_solve((L, True), b)


def _logdet_from_chol(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


@dataclass(frozen=True, eq=False)
class GaussianPotential:
    h: np.ndarray
    K: np.ndarray
    g: float
    labels: tuple

    def __post_init__(self):
        h = np.atleast_1d(np.asarray(self.h, dtype=float)).copy()
        K = np.atleast_2d(np.asarray(self.K, dtype=float)).copy()
        labels = tuple(self.labels)
        n = len(labels)
        if h.shape != (n,) or K.shape != (n, n):
            raise PotentialError(
                f"shape mismatch: h {h.shape}, K {K.shape}, {n} labels"
            )
        if len(set(labels)) != n:
            raise LabelError(f"duplicate labels {labels}")
        if not np.allclose(K, K.T, rtol=1e-10, atol=1e-12 * (1 + np.abs(K).max(initial=0))):
            raise PotentialError("precision matrix K must be symmetric")
        K = 0.5 * (K + K.T)
        h.setflags(write=False)
        K.setflags(write=False)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "g", float(self.g))
        object.__setattr__(self, "labels", labels)

    # -- construction -------------------------------------------------------

    @classmethod
    def flat(cls, labels: Sequence[Hashable] = ()) -> "GaussianPotential":
        """The multiplicative identity ``[0, 0, 0]`` on ``labels``."""
        n = len(labels)
        return cls(np.zeros(n), np.zeros((n, n)), 0.0, tuple(labels))

    @classmethod
    def from_moments(cls, mu, sigma, log_scale: float = 0.0, labels=None) -> "GaussianPotential":
        """Potential ``exp(log_scale) * N(mu, sigma)``."""
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        n = mu.shape[0]
        if labels is None:
            labels = tuple(range(n))
        L = _cholesky_cov(sigma)
        K = _chol_solve(L, np.eye(n))
        h = K @ mu
        # log|K/2pi| = -log|sigma| - n log 2pi
        logdet_K = -_logdet_from_chol(L)
        g = log_scale + 0.5 * (logdet_K - n * LOG_2PI) - 0.5 * float(h @ mu)
        return cls(h, K, g, labels)

    @classmethod
    def linear_gaussian(cls, A, Q, parent_labels, child_labels, offset=None) -> "GaussianPotential":
        """Conditional density ``N(child; A parent + offset, Q)`` as a joint potential."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        m, n = A.shape
        b = np.zeros(m) if offset is None else np.atleast_1d(np.asarray(offset, dtype=float))
        L = _cholesky_cov(Q)
        Qi = _chol_solve(L, np.eye(m))
        AtQi = A.T @ Qi
        K = np.block([[AtQi @ A, -AtQi], [-Qi @ A, Qi]])
        h = np.concatenate([-AtQi @ b, Qi @ b])
        g = -0.5 * (_logdet_from_chol(L) + m * LOG_2PI) - 0.5 * float(b @ Qi @ b)
        return cls(h, K, g, tuple(parent_labels) + tuple(child_labels))

    # -- queries ------------------------------------------------------------

    @property
    def dim(self) -> int:
        return len(self.labels)

    def index(self, labels: Iterable[Hashable]) -> list[int]:
        pos = {lab: i for i, lab in enumerate(self.labels)}
        try:
            return [pos[lab] for lab in labels]
        except KeyError as exc:
            raise LabelError(f"unknown label {exc.args[0]!r}") from None

    def is_proper(self) -> bool:
        try:
            cholesky_pd(self.K)
        except ImproperPotentialError:
            return False
        return True

    def log_density(self, x) -> float:
        """``log phi(x)`` with ``x`` ordered like ``labels``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return self.g + float(self.h @ x) - 0.5 * float(x @ self.K @ x)

    def log_integral(self) -> float:
        return self.to_moments()[2]

    def to_moments(self):
        """Return ``(mu, sigma, log_integral)``; requires a proper potential."""
        n = self.dim
        L = cholesky_pd(self.K, "precision matrix K")
        sigma = _chol_solve(L, np.eye(n))
        mu = sigma @ self.h
        log_int = self.g - 0.5 * (_logdet_from_chol(L) - n * LOG_2PI) + 0.5 * float(self.h @ mu)
        return mu, sigma, log_int

    # -- algebra ------------------------------------------------------------

    def reorder(self, labels: Sequence[Hashable]) -> "GaussianPotential":
        idx = self.index(labels)
        if len(idx) != self.dim:
            raise LabelError("reorder must mention every label exactly once")
        return GaussianPotential(self.h[idx], self.K[np.ix_(idx, idx)], self.g, tuple(labels))

    def relabel(self, mapping: dict) -> "GaussianPotential":
        return GaussianPotential(self.h, self.K, self.g, tuple(mapping.get(l, l) for l in self.labels))

    def extend(self, labels: Sequence[Hashable]) -> "GaussianPotential":
        """Zero-pad onto a superset of labels (in the given order)."""
        labels = tuple(labels)
        missing = set(self.labels) - set(labels)
        if missing:
            raise LabelError(f"target domain lacks labels {sorted(map(str, missing))}")
        n = len(labels)
        idx = [labels.index(l) for l in self.labels]
        h = np.zeros(n)
        K = np.zeros((n, n))
        h[idx] = self.h
        K[np.ix_(idx, idx)] = self.K
        return GaussianPotential(h, K, self.g, labels)

    def multiply(self, other: "GaussianPotential") -> "GaussianPotential":
        labels = self.labels + tuple(l for l in other.labels if l not in self.labels)
        a = self.extend(labels)
        b = other.extend(labels)
        return GaussianPotential(a.h + b.h, a.K + b.K, a.g + b.g, labels)

    __mul__ = multiply

    def marginalize(self, keep: Iterable[Hashable]) -> "GaussianPotential":
        """Integrate out every label not in ``keep``."""
        keep = set(keep)
        unknown = keep - set(self.labels)
        if unknown:
            raise LabelError(f"unknown labels {sorted(map(str, unknown))}")
        i1 = [i for i, l in enumerate(self.labels) if l in keep]
        i2 = [i for i, l in enumerate(self.labels) if l not in keep]
        if not i2:
            return self
        K22 = self.K[np.ix_(i2, i2)]
        try:
            L = cholesky_pd(K22, "eliminated block")
        except ImproperPotentialError as exc:
            raise ImproperPotentialError(f"improper marginal: {exc}") from None
        h1, h2 = self.h[i1], self.h[i2]
        K12 = self.K[np.ix_(i1, i2)]
        W = _chol_solve(L, np.column_stack([K12.T, h2]))  # K22^-1 [K21, h2]
        Kinv_K21, Kinv_h2 = W[:, :-1], W[:, -1]
        h = h1 - K12 @ Kinv_h2
        K = self.K[np.ix_(i1, i1)] - K12 @ Kinv_K21
        n2 = len(i2)
        g = self.g - 0.5 * (_logdet_from_chol(L) - n2 * LOG_2PI) + 0.5 * float(h2 @ Kinv_h2)
        return GaussianPotential(h, K, g, tuple(self.labels[i] for i in i1))

    def condition(self, observed: Sequence[Hashable], values) -> "GaussianPotential":
        """Clamp ``observed`` labels to ``values``; result lives on the rest."""
        observed = tuple(observed)
        if not observed:
            return self
        i2 = self.index(observed)
        x2 = np.atleast_1d(np.asarray(values, dtype=float))
        if x2.shape != (len(i2),):
            raise PotentialError("values must match the observed labels")
        obs = set(observed)
        i1 = [i for i, l in enumerate(self.labels) if l not in obs]
        K22 = self.K[np.ix_(i2, i2)]
        h = self.h[i1] - self.K[np.ix_(i1, i2)] @ x2
        g = self.g + float(self.h[i2] @ x2) - 0.5 * float(x2 @ K22 @ x2)
        return GaussianPotential(h, self.K[np.ix_(i1, i1)], g, tuple(self.labels[i] for i in i1))

    def shift_log_scale(self, delta: float) -> "GaussianPotential":
        return GaussianPotential(self.h, self.K, self.g + delta, self.labels)

    def __repr__(self):
        return f"GaussianPotential(labels={self.labels}, h={self.h}, K={self.K.tolist()}, g={self.g:.6g})"


def from_moments(mu, sigma, log_scale: float = 0.0, labels=None) -> GaussianPotential:
    return GaussianPotential.from_moments(mu, sigma, log_scale, labels)


def to_moments(p: GaussianPotential):
    return p.to_moments()


def multiply(a: GaussianPotential, b: GaussianPotential) -> GaussianPotential:
    return a.multiply(b)


def marginalize(p: GaussianPotential, keep) -> GaussianPotential:
    return p.marginalize(keep)


def condition(p: GaussianPotential, observed, values) -> GaussianPotential:
    return p.condition(observed, values)
