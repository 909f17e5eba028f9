"""
Gaussian and Gaussian-mixture primitives shared by the whole pipeline.

Everything is evaluated in log space. Covariances are factorized with a
Cholesky decomposition; when that fails a single ridge retry is attempted
(``1e-6 * trace / d`` on the diagonal) before giving up.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import InvalidModelError, ShapeError, SingularCovarianceError

LOG_2PI = np.log(2.0 * np.pi)
RIDGE_FACTOR = 1e-6


def cholesky(cov: np.ndarray, component: Optional[int] = None) -> np.ndarray:
    """Lower Cholesky factor of ``cov`` with one ridge retry."""
    cov = np.asarray(cov, dtype=float)
    if not np.all(np.isfinite(cov)):
        raise SingularCovarianceError("covariance has non-finite entries", component)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[0]
    ridge = RIDGE_FACTOR * np.trace(cov) / d
    if ridge > 0:
        try:
            return np.linalg.cholesky(cov + ridge * np.eye(d))
        except np.linalg.LinAlgError:
            pass
    where = "" if component is None else f" (component {component})"
    raise SingularCovarianceError(f"covariance is not positive definite{where}", component)


def _check_dims(x, mean, cov):
    d = mean.shape[-1]
    if x.shape[-1] != d or cov.shape != (d, d):
        raise ShapeError(
            f"dimension mismatch: x has {x.shape[-1]}, mean {d}, cov {cov.shape}"
        )


def gaussian_log_density(x, mean, cov, component: Optional[int] = None):
    """Log density of N(mean, cov) at ``x``.

    ``x`` may be a single vector (returns a float) or an ``(n, d)`` array
    (returns an ``(n,)`` array).
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    _check_dims(x, mean, cov)
    chol = cholesky(cov, component)
    single = x.ndim == 1
    diff = np.atleast_2d(x) - mean
    z = solve_triangular(chol, diff.T, lower=True)
    maha = np.einsum("ij,ij->j", z, z)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (mean.shape[0] * LOG_2PI + log_det + maha)
    return float(out[0]) if single else out


def mahalanobis_norm(v, cov) -> float:
    """sqrt(v^T cov^{-1} v)."""
    v = np.asarray(v, dtype=float)
    cov = np.asarray(cov, dtype=float)
    _check_dims(v, v, cov)
    z = solve_triangular(cholesky(cov), v, lower=True)
    return float(np.sqrt(z @ z))


def component_log_densities(X, means, covs) -> np.ndarray:
    """``(n, K)`` matrix of log N(x_n | mean_k, cov_k)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    K = means.shape[0]
    out = np.empty((n, K))
    for k in range(K):
        chol = cholesky(covs[k], k)
        z = solve_triangular(chol, (X - means[k]).T, lower=True)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        out[:, k] = -0.5 * (d * LOG_2PI + log_det + np.einsum("ij,ij->j", z, z))
    return out


def repair_psd(cov: np.ndarray, rel_floor: float = 1e-10) -> np.ndarray:
    """Symmetrize and clamp eigenvalues at ``rel_floor * trace / d``."""
    cov = 0.5 * (cov + cov.T)
    d = cov.shape[0]
    floor = rel_floor * max(np.trace(cov), 0.0) / d
    if floor > 0 and np.all(np.isfinite(cov)):
        try:
            # factorizable after removing the floor: every eigenvalue exceeds it
            np.linalg.cholesky(cov - floor * np.eye(d))
            return cov
        except np.linalg.LinAlgError:
            pass
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() >= floor and floor > 0:
        return cov
    if floor <= 0:
        floor = rel_floor
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    covariance: np.ndarray
    count: float = 0.0


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """A Gaussian mixture plus the bookkeeping the online loop needs.

    ``covariances`` hold the moment estimates produced by the fitting and
    update equations. When ``prior_strength`` is positive, densities are
    evaluated with the conjugate-prior covariance
    ``(count * cov + prior_strength * prior_covariance) / (count + prior_strength)``
    so that components backed by few points (relative to the dimension)
    stay well conditioned.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    counts: np.ndarray = None
    threshold: Optional[float] = None
    round: int = 0
    prior_strength: float = 0.0
    prior_covariance: Optional[np.ndarray] = None
    epsilon: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        K, d = mu.shape
        cov = np.asarray(self.covariances, dtype=float).reshape(K, d, d)
        counts = (
            np.zeros(K) if self.counts is None
            else np.asarray(self.counts, dtype=float).reshape(-1)
        )
        if w.shape[0] != K or counts.shape[0] != K:
            raise ShapeError("weights, means, covariances and counts disagree on K")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)
        object.__setattr__(self, "counts", counts)
        if self.prior_covariance is not None:
            object.__setattr__(
                self, "prior_covariance",
                np.asarray(self.prior_covariance, dtype=float).reshape(d, d),
            )

    @classmethod
    def from_components(cls, components, **kwargs) -> "MixtureModel":
        if not components:
            raise InvalidModelError("a mixture needs at least one component")
        return cls(
            weights=np.array([c.weight for c in components]),
            means=np.array([c.mean for c in components]),
            covariances=np.array([c.covariance for c in components]),
            counts=np.array([c.count for c in components]),
            **kwargs,
        )

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list:
        return [
            GaussianComponent(float(w), m, c, float(n))
            for w, m, c, n in zip(self.weights, self.means, self.covariances, self.counts)
        ]

    def replace(self, **changes) -> "MixtureModel":
        return replace(self, **changes)

    def validate(self) -> None:
        if self.n_components == 0:
            raise InvalidModelError("mixture has no components")
        if abs(self.weights.sum() - 1.0) > 1e-8:
            raise InvalidModelError(f"weights sum to {self.weights.sum():.12g}, not 1")
        if np.any(self.weights < 0) or np.any(self.counts < 0):
            raise InvalidModelError("negative weight or count")

    @cached_property
    def density_covariances(self) -> np.ndarray:
        if self.prior_strength <= 0 or self.prior_covariance is None:
            return self.covariances
        n = np.maximum(self.counts, 0.0)[:, None, None]
        kappa = self.prior_strength
        return (n * self.covariances + kappa * self.prior_covariance) / (n + kappa)

    @cached_property
    def _density_factors(self):
        covs = self.density_covariances
        L = None
        if np.all(np.isfinite(covs)):
            try:
                L = np.linalg.cholesky(covs)
            except np.linalg.LinAlgError:
                pass
        if L is None:
            L = np.array([cholesky(c, k) for k, c in enumerate(covs)])
        return L, 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)

    def component_log_densities(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ShapeError(f"data has dimension {X.shape[1]}, model has {self.dim}")
        L, logdet = self._density_factors
        out = np.empty((X.shape[0], self.n_components))
        for k in range(self.n_components):
            z = solve_triangular(L[k], (X - self.means[k]).T, lower=True, check_finite=False)
            out[:, k] = -0.5 * (self.dim * LOG_2PI + logdet[k] + np.einsum("ij,ij->j", z, z))
        return out

    def joint_log_densities(self, X) -> np.ndarray:
        """``log(w_k) + log g(x | mu_k, cov_k)`` as an ``(n, K)`` array."""
        with np.errstate(divide="ignore"):
            return self.component_log_densities(X) + np.log(self.weights)

    def log_likelihood(self, X) -> np.ndarray:
        self.validate()
        return logsumexp(self.joint_log_densities(X), axis=1)

    def posterior(self, X):
        """Responsibilities ``(n, K)`` and per-point log-likelihood ``(n,)``."""
        self.validate()
        joint = self.joint_log_densities(X)
        ll = logsumexp(joint, axis=1)
        return np.exp(joint - ll[:, None]), ll


def mixture_log_likelihood(x, model: MixtureModel):
    """ln sum_k w_k g(x | mu_k, cov_k); float for one vector, array for many."""
    x = np.asarray(x, dtype=float)
    out = model.log_likelihood(np.atleast_2d(x))
    return float(out[0]) if x.ndim == 1 else out
