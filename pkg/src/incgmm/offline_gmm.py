"""
Offline robust GMM: k-means initialisation, outlier-aware EM by block
coordinate descent, BIC selection of K, calibration of the outlier penalty
``pi`` to a target outlier fraction, and the log-likelihood threshold.

Objective minimised by :func:`robust_em_fit`::

    F = -sum_n log sum_i w_i g(x_n - o_n | mu_i, C_i)
        + pi * sum_n ||o_n||_{S_n^-1}
        + sum_i (kappa / 2) * (tr(C_i^-1 R) + log det C_i)

``S_n^-1`` is the responsibility-weighted precision of the starting model at
``x_n``, held fixed during a fit. The last term is a conjugate covariance prior with ``kappa`` pseudo-points at
the reference covariance ``R``; ``C_i`` is the covariance used for the
density. Every block update is an exact minimiser of the EM surrogate, so
``F`` never increases.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import cdist

from .core_math import LOG_2PI, GaussianComponent, MixtureModel, cholesky
from .dbscan import epsilon_heuristic, kth_neighbor_distances
from .errors import (
    CalibrationError,
    ConfigError,
    DegenerateKError,
    IncGmmError,
    InsufficientDataError,
)

OUTLIER = -1
MAX_ITERS = 500
TOL = 1e-6
PI_RATIO = 0.85
PI_STEPS = 60
RESTARTS = 5
SCREEN_ITERS = 100
KMEANS_RIDGE = 1e-6
MIN_MASS = 1e-10


def default_prior_strength(d: int) -> float:
    """Pseudo-point count of the covariance prior."""
    return float(d * (d + 2))


@dataclass(frozen=True)
class OutlierStore:
    """Accumulated outlier vectors with their (round, index) origin."""

    vectors: np.ndarray
    origins: np.ndarray

    @classmethod
    def empty(cls, d: int) -> "OutlierStore":
        return cls(np.empty((0, d)), np.empty((0, 2), dtype=int))

    @classmethod
    def from_round(cls, vectors, round_index: int, indices) -> "OutlierStore":
        vectors = np.asarray(vectors, dtype=float)
        indices = np.asarray(indices, dtype=int).reshape(-1)
        if vectors.ndim == 1:
            vectors = vectors.reshape(indices.shape[0], -1)
        origins = np.column_stack([np.full(indices.shape[0], round_index), indices])
        return cls(vectors, origins.astype(int).reshape(-1, 2))

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def concat(self, other: "OutlierStore") -> "OutlierStore":
        return OutlierStore(
            np.vstack([self.vectors, other.vectors]),
            np.vstack([self.origins, other.origins]).astype(int),
        )

    def subset(self, mask) -> "OutlierStore":
        mask = np.asarray(mask)
        return OutlierStore(self.vectors[mask], self.origins[mask])


@dataclass
class RobustFitReport:
    objective: list = field(default_factory=list)
    pi: float = math.inf
    n_iter: int = 0
    converged: bool = False
    diverged: bool = False


@dataclass
class FitResult:
    model: MixtureModel
    offsets: np.ndarray
    report: RobustFitReport
    log_likelihood: float = 0.0

    @property
    def outlier_mask(self) -> np.ndarray:
        return np.any(self.offsets != 0.0, axis=1)


# ---------------------------------------------------------------- k-means


def _kmeanspp(X, K, rng):
    # greedy k-means++: draw 2 + ln K candidates per step, keep the one that
    # lowers the potential most
    n = X.shape[0]
    trials = 2 + int(np.log(K))
    centers = [int(rng.integers(n))]
    d2 = np.sum((X - X[centers[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            cand = rng.choice(n, size=trials, p=d2 / total)
        else:
            free = np.setdiff1d(np.arange(n), centers)
            cand = rng.choice(free, size=1)
        cand_d2 = np.minimum(d2, cdist(X[cand], X, "sqeuclidean"))
        best = int(np.argmin(cand_d2.sum(axis=1)))
        centers.append(int(cand[best]))
        d2 = cand_d2[best]
    return X[centers].copy()


def _lloyd(X, centers, max_iter=100):
    labels = np.argmin(cdist(X, centers, "sqeuclidean"), axis=1)
    for _ in range(max_iter):
        for k in range(centers.shape[0]):
            members = labels == k
            if members.any():
                centers[k] = X[members].mean(axis=0)
        new = np.argmin(cdist(X, centers, "sqeuclidean"), axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
    return centers, labels


def kmeans(X, K: int, seed: int = 0):
    """k-means++ seeded Lloyd iterations. Returns (centers, labels)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if K < 1:
        raise ConfigError("K must be >= 1")
    if X.shape[0] < K:
        raise InsufficientDataError(f"{X.shape[0]} points cannot support K={K}")
    rng = np.random.default_rng(seed)
    centers, labels = _lloyd(X, _kmeanspp(X, K, rng))
    sizes = np.bincount(labels, minlength=K)
    if np.any(sizes == 0):
        dist = np.sum((X - centers[labels]) ** 2, axis=1)
        for k in np.flatnonzero(sizes == 0):
            far = int(np.argmax(dist))
            centers[k] = X[far]
            dist[far] = -1.0
        labels = np.argmin(cdist(X, centers, "sqeuclidean"), axis=1)
        sizes = np.bincount(labels, minlength=K)
        if np.any(sizes == 0):
            raise DegenerateKError(f"k-means left {int(np.sum(sizes == 0))} empty clusters")
    return centers, labels


def kmeans_init(data, K: int, seed: int = 0, trim: int = 0, trim_k: int = 5) -> list:
    """Mixture components from a k-means partition (covariances get a small ridge).

    With ``trim > 0`` the ``trim`` points in the sparsest neighbourhoods
    (largest ``trim_k``-th neighbour distance) are left out of the k-means
    run, so a small remote group cannot claim a centroid of its own.
    """
    X = np.atleast_2d(np.asarray(data, dtype=float))
    if trim > 0:
        if X.shape[0] - trim <= max(K, trim_k):
            raise InsufficientDataError("too few points left after trimming")
        keep = np.argsort(kth_neighbor_distances(X, trim_k), kind="stable")[: X.shape[0] - trim]
        X = X[np.sort(keep)]
    n, d = X.shape
    centers, labels = kmeans(X, K, seed)
    ridge = KMEANS_RIDGE * max(np.trace(np.atleast_2d(np.cov(X.T, bias=True))), 1e-300) / d
    comps = []
    for k in range(K):
        members = X[labels == k]
        diff = members - centers[k]
        cov = diff.T @ diff / members.shape[0] + ridge * np.eye(d)
        comps.append(GaussianComponent(members.shape[0] / n, centers[k].copy(), cov,
                                       float(members.shape[0])))
    return comps


# ---------------------------------------------------------------- EM core


def _as_model(init, prior_strength, prior_covariance, d):
    model = init if isinstance(init, MixtureModel) else MixtureModel.from_components(list(init))
    if prior_strength is None:
        prior_strength = model.prior_strength if model.prior_covariance is not None \
            else default_prior_strength(d)
    if prior_covariance is None:
        prior_covariance = model.prior_covariance
    if prior_covariance is None:
        w = model.weights / model.weights.sum()
        prior_covariance = np.einsum("k,kij->ij", w, model.covariances)
    return model.replace(prior_strength=float(prior_strength),
                         prior_covariance=np.asarray(prior_covariance, dtype=float))


def _factor(covs):
    """Batched Cholesky factors, precisions and log-determinants."""
    try:
        L = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        L = np.array([cholesky(c, k) for k, c in enumerate(covs)])
    Linv = np.linalg.inv(L)
    P = np.swapaxes(Linv, 1, 2) @ Linv
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    return L, P, logdet


def _prior_penalty(model: MixtureModel) -> float:
    kappa = model.prior_strength
    if kappa <= 0:
        return 0.0
    total = 0.0
    for k, cov in enumerate(model.density_covariances):
        chol = cholesky(cov, k)
        inv_ref = cho_solve((chol, True), model.prior_covariance)
        total += 0.5 * kappa * (np.trace(inv_ref) + 2.0 * np.sum(np.log(np.diag(chol))))
    return total


@dataclass(frozen=True)
class PenaltyMetric:
    """Per-point penalty metric ``||o||_{M_n}`` with ``M_n = S_n^{-1}``.

    ``chol`` holds the lower Cholesky factors of ``S_n`` with shape
    ``(n, d, d)``.
    """

    chol: np.ndarray

    @cached_property
    def _inv_chol(self) -> np.ndarray:
        return np.linalg.inv(self.chol)

    def norms(self, offsets) -> np.ndarray:
        z = np.einsum("nij,nj->ni", self._inv_chol, offsets)
        return np.sqrt(np.einsum("ij,ij->i", z, z))

    def dual_norms(self, b) -> np.ndarray:
        bt = np.einsum("nji,nj->ni", self.chol, b)  # R_n' b_n
        return np.sqrt(np.einsum("ij,ij->i", bt, bt))


def global_metric_cholesky(X) -> np.ndarray:
    S = np.atleast_2d(np.cov(np.asarray(X, dtype=float).T, bias=True))
    return cholesky(S)


def global_metric(X) -> PenaltyMetric:
    """Same metric for every point: the inverse global sample covariance."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    R = global_metric_cholesky(X)
    return PenaltyMetric(np.broadcast_to(R, (X.shape[0],) + R.shape).copy())


def posterior_metric(X, model: MixtureModel) -> PenaltyMetric:
    """Metric from the responsibility-weighted precision of ``model``.

    Under this metric the critical penalty of a point is roughly its
    Mahalanobis distance to the components that own it, so ``pi`` does not
    depend on the scale of the data.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    resp, _ = model.posterior(X)
    precisions = np.array([np.linalg.inv(c) for c in model.density_covariances])
    M = np.einsum("nk,kij->nij", resp, precisions)
    S = np.linalg.inv(0.5 * (M + np.swapaxes(M, 1, 2)))
    return PenaltyMetric(np.linalg.cholesky(0.5 * (S + np.swapaxes(S, 1, 2))))


def _precisions(model):
    return np.array([np.linalg.inv(c) for c in model.density_covariances])


def _precision_residuals(X, resp, means, precisions):
    b = np.zeros_like(X)
    for k in range(means.shape[0]):
        b += resp[:, k, None] * ((X - means[k]) @ precisions[k])
    return b


def _offset_step(X, resp, means, precisions, pi, metric: PenaltyMetric):
    """Exact minimiser of the per-point outlier subproblem.

    For each point, minimise ``1/2 o'Ao - b'o + pi ||o||_{S^-1}`` with
    ``A = sum_i r_i P_i`` and ``b = sum_i r_i P_i (x - mu_i)``. The solution
    is zero iff ``||b||_S <= pi``; otherwise it solves a one-dimensional
    secular equation in the whitened coordinates ``o = R u`` (``S = R R'``).
    """
    n, d = X.shape
    b = _precision_residuals(X, resp, means, precisions)
    crit = metric.dual_norms(b)
    offsets = np.zeros((n, d))
    active = np.flatnonzero(crit > pi)
    if active.size == 0:
        return offsets, crit
    A = np.einsum("nk,kij->nij", resp[active], precisions)
    if pi == 0:
        offsets[active] = np.linalg.solve(A, b[active][:, :, None])[:, :, 0]
        return offsets, crit
    R = metric.chol[active]
    At = np.swapaxes(R, 1, 2) @ A @ R
    lam, Q = np.linalg.eigh(0.5 * (At + np.swapaxes(At, 1, 2)))
    bt = np.einsum("nji,nj->ni", R, b[active])
    beta2 = np.einsum("nji,nj->ni", Q, bt) ** 2
    # root of q(t) = sum beta^2 / (lam t + pi)^2 = 1; Newton on 1/sqrt(q) - 1,
    # which is close to linear in t (as in trust-region secular equations)
    t = np.zeros(active.size)
    for _ in range(100):
        den = lam * t[:, None] + pi
        q = np.sum(beta2 / den**2, axis=1)
        dq = -2.0 * np.sum(beta2 * lam / den**3, axis=1)
        g = q**-0.5 - 1.0
        dg = -0.5 * q**-1.5 * dq
        step = -g / dg
        t = np.maximum(t + step, 0.5 * t)
        if np.all(np.abs(step) <= 8 * np.finfo(float).eps * np.abs(t)):
            break
    beta = np.einsum("nji,nj->ni", Q, bt)
    u = np.einsum("nij,nj->ni", Q, beta * t[:, None] / (lam * t[:, None] + pi))
    offsets[active] = np.einsum("nij,nj->ni", R, u)
    return offsets, crit


def critical_pi(X, model: MixtureModel, metric: PenaltyMetric = None) -> np.ndarray:
    """Per-point penalty above which the point's outlier offset is zero."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if metric is None:
        metric = posterior_metric(X, model)
    resp, _ = model.posterior(X)
    return metric.dual_norms(_precision_residuals(X, resp, model.means, _precisions(model)))


def _bcd(X, model, pi, offsets, max_iters, tol, metric):
    n, d = X.shape
    K = model.n_components
    kappa = model.prior_strength
    ref = model.prior_covariance
    report = RobustFitReport(pi=pi)
    robust = math.isfinite(pi)

    def evaluate(model, offsets):
        L, P, logdet = _factor(model.density_covariances)
        Linv = np.linalg.inv(L)
        Y = X - offsets
        joint = np.empty((n, K))
        for k in range(K):
            Z = (Y - model.means[k]) @ Linv[k].T
            joint[:, k] = np.einsum("ij,ij->i", Z, Z)
        with np.errstate(divide="ignore"):
            joint = -0.5 * (joint + (d * LOG_2PI) + logdet) + np.log(model.weights)
        top = joint.max(axis=1, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        ll = np.log(np.exp(joint - top).sum(axis=1)) + top[:, 0]
        resp = np.exp(joint - ll[:, None])
        obj = -ll.sum()
        if kappa > 0:
            obj += 0.5 * kappa * float(np.sum(P * ref[None]) + logdet.sum())
        if robust and pi > 0:
            obj += pi * metric.norms(offsets).sum()
        return resp, ll, obj, P

    resp, ll, obj, P = evaluate(model, offsets)
    report.objective.append(obj)
    rises = 0
    for it in range(1, max_iters + 1):
        mass = resp.sum(axis=0)
        weights = mass / n
        Y = X - offsets
        means = model.means.copy()
        for k in range(K):
            if mass[k] > MIN_MASS:
                means[k] = resp[:, k] @ Y / mass[k]
        if robust:
            offsets, _ = _offset_step(X, resp, means, P, pi, metric)
            Y = X - offsets
        covs = model.covariances.copy()
        for k in range(K):
            if mass[k] > MIN_MASS:
                diff = Y - means[k]
                covs[k] = (resp[:, k, None] * diff).T @ diff / mass[k]
                covs[k] = 0.5 * (covs[k] + covs[k].T)
        model = model.replace(weights=weights, means=means, covariances=covs, counts=mass)
        resp, ll, new_obj, P = evaluate(model, offsets)
        report.objective.append(new_obj)
        change = new_obj - obj
        scale = max(1.0, abs(new_obj))
        rises = rises + 1 if change > 10 * tol * scale else 0
        if rises >= 3:
            report.diverged = True
        report.n_iter = it
        obj = new_obj
        if abs(change) <= tol * scale:
            report.converged = True
            break
    return FitResult(model, offsets, report, float(ll.sum()))


def em_fit(data, init, max_iters=MAX_ITERS, tol=TOL, prior_strength=None,
           prior_covariance=None) -> FitResult:
    """Standard (non-robust) EM from the given initial components."""
    X = np.atleast_2d(np.asarray(data, dtype=float))
    model = _as_model(init, prior_strength, prior_covariance, X.shape[1])
    return _bcd(X, model, math.inf, np.zeros_like(X), max_iters, tol, None)


def robust_em_fit(data, pi: float, init, max_iters=MAX_ITERS, tol=TOL,
                  init_offsets=None, prior_strength=None, prior_covariance=None,
                  metric: PenaltyMetric = None) -> FitResult:
    """Outlier-aware EM (block coordinate descent) for a fixed penalty ``pi``.

    Points with a nonzero offset ``o_n`` are the outliers of the fit; see
    :attr:`FitResult.outlier_mask`. The penalty metric defaults to
    :func:`posterior_metric` of ``init`` and stays fixed during the fit.
    """
    if pi < 0:
        raise ConfigError("pi must be >= 0")
    X = np.atleast_2d(np.asarray(data, dtype=float))
    model = _as_model(init, prior_strength, prior_covariance, X.shape[1])
    if metric is None:
        metric = posterior_metric(X, model)
    offsets = np.zeros_like(X) if init_offsets is None else np.array(init_offsets, dtype=float)
    return _bcd(X, model, float(pi), offsets, max_iters, tol, metric)


def outlier_store_from_fit(X, fit: FitResult, round_index: int = 0) -> OutlierStore:
    idx = np.flatnonzero(fit.outlier_mask)
    return OutlierStore.from_round(np.asarray(X)[idx], round_index, idx)


# ---------------------------------------------------------------- model selection


def n_parameters(K: int, d: int) -> int:
    return K - 1 + K * d + K * d * (d + 1) // 2


def bic(log_likelihood: float, K: int, d: int, n: int) -> float:
    return -2.0 * log_likelihood + n_parameters(K, d) * math.log(n)


def fit_standard_gmm(data, K: int, seed: int = 0, restarts: int = RESTARTS,
                     prior_strength=None, max_iters=MAX_ITERS, tol=TOL) -> FitResult:
    """Best (highest likelihood) standard EM fit over k-means++ restarts."""
    X = np.atleast_2d(np.asarray(data, dtype=float))
    best = None
    errors = []
    for r in range(restarts):
        try:
            fit = em_fit(X, kmeans_init(X, K, seed + r), max_iters, tol, prior_strength)
        except IncGmmError as exc:
            errors.append(exc)
            continue
        if best is None or fit.log_likelihood > best.log_likelihood:
            best = fit
    if best is None:
        raise errors[-1]
    return best


def select_k_bic(data, k_range: Sequence[int], seed: int = 0, restarts: int = RESTARTS,
                 prior_strength=None):
    """Return (K with lowest BIC, {K: (FitResult, bic)}); ties go to smaller K."""
    X = np.atleast_2d(np.asarray(data, dtype=float))
    n, d = X.shape
    fits = {}
    for K in sorted(set(int(k) for k in k_range)):
        try:
            fit = fit_standard_gmm(X, K, seed, restarts, prior_strength)
        except IncGmmError as exc:
            warnings.warn(f"K={K} skipped: {exc}")
            continue
        fits[K] = (fit, bic(fit.log_likelihood, K, d, n))
    if not fits:
        raise DegenerateKError("no K in the range could be fitted")
    best = min(fits, key=lambda k: (fits[k][1], k))
    return best, fits


# ---------------------------------------------------------------- pi calibration


def target_outlier_count(alpha: float, n: int) -> int:
    # round away representation noise such as (1/n) * n = 1.0000000000000002
    return int(math.ceil(round(alpha * n, 9)))


@dataclass
class Calibration:
    pi: float
    fit: FitResult
    history: list  # (pi, outlier count) per step
    target: int


def trimmed_log_likelihood(model: MixtureModel, X, drop: int) -> float:
    """Sum of log-likelihoods without the ``drop`` least likely points."""
    ll = np.sort(model.log_likelihood(X))
    return float(ll[drop:].sum())


def calibrate_pi(data, K: int, alpha: float, seed: int = 0, init=None,
                 ratio: float = PI_RATIO, max_steps: int = PI_STEPS,
                 restarts: int = RESTARTS, prior_strength=None,
                 max_iters=MAX_ITERS, tol=TOL, refine_steps: int = 30) -> Calibration:
    """Decrease ``pi`` geometrically until at least ceil(alpha N) outliers appear.

    Each step is warm-started from the previous fit. When the step that
    first reaches the target overshoots it, ``pi`` is bisected (in log
    space) between the last two values and the largest ``pi`` that still
    reaches the target is kept.

    Without ``init``, candidate starts are standard EM fits from k-means
    restarts, each run both on all points and with the ceil(alpha N)
    sparsest points left out of k-means. Every distinct candidate is
    calibrated and the result with the highest trimmed log-likelihood
    (ignoring the ceil(alpha N) least likely points) is kept. Plain
    likelihood would favour fits that spend a component on contamination.
    """
    X = np.atleast_2d(np.asarray(data, dtype=float))
    if not 0 <= alpha < 1:
        raise ConfigError("alpha must lie in [0, 1)")
    target = target_outlier_count(alpha, X.shape[0])
    args = (ratio, max_steps, prior_strength, max_iters, tol, refine_steps)
    if init is not None:
        return _calibrate_from(X, init, target, *args)
    starts, seen, errors = [], set(), []
    for r in range(restarts):
        for trim in sorted({0, target}):
            try:
                fit = em_fit(X, kmeans_init(X, K, seed + r, trim=trim),
                             min(max_iters, SCREEN_ITERS), tol, prior_strength)
            except IncGmmError as exc:
                errors.append(exc)
                continue
            key = float(f"{fit.log_likelihood:.6g}")
            if key not in seen:
                seen.add(key)
                starts.append(fit.model)
    if len(starts) == 1:
        return _calibrate_from(X, starts[0], target, *args)
    # screen with a capped iteration budget and no refinement, then redo the winner
    best, best_score = None, -math.inf
    screen = (ratio, max_steps, prior_strength, min(max_iters, SCREEN_ITERS), tol, 0)
    for start in starts:
        try:
            cal = _calibrate_from(X, start, target, *screen)
        except IncGmmError as exc:
            errors.append(exc)
            continue
        score = trimmed_log_likelihood(cal.fit.model, X, target)
        if score > best_score:
            best, best_score = start, score
    if best is None:
        raise errors[-1]
    return _calibrate_from(X, best, target, *args)


def _calibrate_from(X, init, target, ratio, max_steps, prior_strength, max_iters, tol,
                    refine_steps) -> Calibration:
    model = _as_model(init, prior_strength, None, X.shape[1])

    centered = solve_triangular(global_metric_cholesky(X), (X - X.mean(axis=0)).T, lower=True)
    pi0 = 10.0 * float(np.sqrt(np.max(np.einsum("ij,ij->j", centered, centered))))
    pi0 = max(pi0, 1.01 * float(np.max(critical_pi(X, model))))

    def run(pi, start):
        fit = robust_em_fit(X, pi, start.model, max_iters, tol, start.offsets)
        count = int(fit.outlier_mask.sum())
        history.append((pi, count))
        return fit, count

    history = []
    prev = FitResult(model, np.zeros_like(X), RobustFitReport())
    most = 0
    for g in range(max_steps + 1):
        pi = pi0 * ratio**g
        fit, count = run(pi, prev)
        most = max(most, count)
        if count >= target:
            break
        prev = fit
    else:
        raise CalibrationError(
            f"reached only {most} outliers (target {target}) after {max_steps} steps", most
        )
    if target > 0 and count > target and g > 0:
        lo_pi, hi_pi = pi, pi / ratio  # hi_pi gives fewer than target
        low_fit = prev
        for _ in range(refine_steps):
            mid = math.sqrt(lo_pi * hi_pi)
            mid_fit, mid_count = run(mid, low_fit)
            if mid_count >= target:
                lo_pi, fit, count = mid, mid_fit, mid_count
                if count == target:
                    break
            else:
                hi_pi, low_fit = mid, mid_fit
            if hi_pi / lo_pi < 1.0 + 1e-4:
                break
        pi = lo_pi
    return Calibration(pi, fit, history, target)


# ---------------------------------------------------------------- threshold & labels


def outlier_ranks(model: MixtureModel, data, alpha: float):
    """Log-likelihoods, the ceil(alpha N) lowest-ranked indices, and r."""
    X = np.atleast_2d(np.asarray(data, dtype=float))
    m = target_outlier_count(alpha, X.shape[0])
    if m > X.shape[0]:
        raise ConfigError(f"ceil(alpha N) = {m} exceeds N = {X.shape[0]}")
    ll = model.log_likelihood(X)
    order = np.argsort(ll, kind="stable")
    return ll, order[:m], (float(ll[order[m - 1]]) if m >= 1 else None)


def compute_threshold(model: MixtureModel, data, alpha: float) -> float:
    """Log-likelihood of the ceil(alpha N)-th least likely point."""
    _, idx, r = outlier_ranks(model, data, alpha)
    if r is None:
        raise ConfigError("alpha N rounds up to zero points; no threshold defined")
    return r


def classify(model: MixtureModel, data, strict: bool = False) -> np.ndarray:
    """Component index per point, or ``OUTLIER``.

    A point is an outlier when ``ln p(x) <= r`` (or ``< r`` with ``strict``).
    """
    if model.threshold is None:
        raise ConfigError("model has no outlier threshold")
    resp, ll = model.posterior(np.atleast_2d(np.asarray(data, dtype=float)))
    labels = np.argmax(resp, axis=1)
    out = ll < model.threshold if strict else ll <= model.threshold
    return np.where(out, OUTLIER, labels)


def classify_point(model: MixtureModel, x) -> int:
    return int(classify(model, np.atleast_2d(x))[0])


# ---------------------------------------------------------------- full offline stage


@dataclass
class OfflineFit:
    model: MixtureModel
    outliers: OutlierStore
    calibration: Calibration
    k: int
    bic_table: dict
    outlier_mask: np.ndarray

    def summary(self) -> dict:
        rep = self.calibration.fit.report
        return {
            "k": self.k,
            "pi": self.calibration.pi,
            "threshold": self.model.threshold,
            "target_outliers": self.calibration.target,
            "robust_fit_outliers": int(self.calibration.fit.outlier_mask.sum()),
            "offline_outliers": int(len(self.outliers)),
            "iterations": rep.n_iter,
            "converged": rep.converged,
            "diverged": rep.diverged,
            "objective_trace": [float(v) for v in rep.objective],
            "pi_history": [[float(p), int(c)] for p, c in self.calibration.history],
            "bic": {str(k): float(v) for k, v in self.bic_table.items()},
            "counts": [float(c) for c in self.model.counts],
            "epsilon": self.model.epsilon,
        }


def fit_offline(data, alpha: float, k: Optional[int] = None, k_range=None, seed: int = 0,
                restarts: int = RESTARTS, prior_strength=None, min_pts: int = 5,
                eps_percentile: float = 0.90) -> OfflineFit:
    """Run the whole offline stage on already-normalised data."""
    X = np.atleast_2d(np.asarray(data, dtype=float))
    bic_table = {}
    init = None
    if k is None:
        if k_range is None:
            raise ConfigError("give either k or k_range")
        k, fits = select_k_bic(X, k_range, seed, restarts, prior_strength)
        bic_table = {K: b for K, (_, b) in fits.items()}
    cal = calibrate_pi(X, k, alpha, seed, init=init, restarts=restarts,
                       prior_strength=prior_strength)
    model = cal.fit.model
    counts = model.counts
    for _ in range(10):
        model = model.replace(counts=counts)
        ll, low, r = outlier_ranks(model, X, alpha)
        mask = np.zeros(X.shape[0], dtype=bool)
        mask[low] = True
        resp, _ = model.posterior(X[~mask])
        new_counts = np.bincount(np.argmax(resp, axis=1), minlength=model.n_components)
        new_counts = new_counts.astype(float)
        if np.array_equal(new_counts, counts):
            break
        counts = new_counts
    model = model.replace(counts=counts)
    ll, low, r = outlier_ranks(model, X, alpha)
    mask = np.zeros(X.shape[0], dtype=bool)
    mask[low] = True
    eps = None
    clustered = X[~mask]
    if clustered.shape[0] > min_pts:
        eps = epsilon_heuristic(clustered, min_pts, eps_percentile)
    model = model.replace(threshold=r, round=0, epsilon=eps)
    idx = np.flatnonzero(mask)
    outliers = OutlierStore.from_round(X[idx], 0, idx)
    return OfflineFit(model, outliers, cal, k, bic_table, mask)
