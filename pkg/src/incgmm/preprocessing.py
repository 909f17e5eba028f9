"""Vector assembly, z-score normalization and PCA.

Statistics are fitted once on offline data and then frozen; online batches
are always transformed with the offline statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, InsufficientDataError, ShapeError

EIGEN_FLOOR = 1e-12


def assemble_vector(series, m: int | None = None, n: int | None = None) -> np.ndarray:
    """Flatten per-parameter sequences parameter-major.

    ``series[j][t]`` is parameter ``j`` at sample ``t``; the result is
    ``[p0_t0, p0_t1, ..., p1_t0, ...]``.
    """
    rows = [np.asarray(s, dtype=float).reshape(-1) for s in series]
    if m is None:
        m = len(rows)
    if len(rows) != m:
        raise ShapeError(f"expected {m} parameters, got {len(rows)}")
    if n is None:
        n = rows[0].shape[0] if rows else 0
    for j, row in enumerate(rows):
        if row.shape[0] != n:
            raise ShapeError(f"parameter {j} has {row.shape[0]} samples, expected {n}")
        bad = np.flatnonzero(~np.isfinite(row))
        if bad.size:
            raise DataError(
                f"non-finite sample at parameter {j}, time index {int(bad[0])}"
            )
    return np.concatenate(rows) if rows else np.empty(0)


@dataclass(frozen=True)
class NormalizationStats:
    means: np.ndarray
    stddevs: np.ndarray

    @property
    def dim(self) -> int:
        return self.means.shape[0]


def fit_normalization(offline) -> NormalizationStats:
    X = np.atleast_2d(np.asarray(offline, dtype=float))
    if X.shape[0] < 2:
        raise InsufficientDataError("normalization needs at least 2 vectors")
    means = X.mean(axis=0)
    std = X.std(axis=0)
    # zero-variance dimensions pass through centered
    tiny = std <= np.finfo(float).eps * np.maximum(1.0, np.abs(means))
    std = np.where(tiny, 1.0, std)
    return NormalizationStats(means, std)


def apply_normalization(x, stats: NormalizationStats) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != stats.dim:
        raise ShapeError(f"vector dimension {x.shape[-1]} != stats dimension {stats.dim}")
    return (x - stats.means) / stats.stddevs


def invert_normalization(z, stats: NormalizationStats) -> np.ndarray:
    return np.asarray(z, dtype=float) * stats.stddevs + stats.means


@dataclass(frozen=True)
class PcaProjection:
    basis: np.ndarray  # (k, d), orthonormal rows
    center: np.ndarray
    explained_fraction: float
    eigenvalues: np.ndarray = None

    @property
    def n_components(self) -> int:
        return self.basis.shape[0]


def fit_pca(offline, explained: float) -> PcaProjection:
    """Smallest k whose leading eigenvalues carry ``explained`` of the variance."""
    if not 0 < explained <= 1:
        raise DataError("explained fraction must lie in (0, 1]")
    X = np.atleast_2d(np.asarray(offline, dtype=float))
    if X.shape[0] < 2:
        raise InsufficientDataError("PCA needs at least 2 vectors")
    center = X.mean(axis=0)
    Xc = X - center
    # SVD avoids forming the d x d covariance when d >> n
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    vals = s**2 / X.shape[0]
    if vals.size == 0 or vals[0] <= 0:
        vals = np.ones(1)
        vt = np.eye(X.shape[1])[:1]
    vals = np.where(vals < EIGEN_FLOOR * vals[0], 0.0, vals)
    total = vals.sum()
    cum = np.cumsum(vals) / total
    k = int(np.searchsorted(cum, explained - 1e-12) + 1)
    k = min(k, int(np.count_nonzero(vals)))
    return PcaProjection(vt[:k].copy(), center, float(cum[k - 1]), vals[:k].copy())


def apply_pca(x, proj: PcaProjection) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != proj.center.shape[0]:
        raise ShapeError(
            f"vector dimension {x.shape[-1]} != projection dimension {proj.center.shape[0]}"
        )
    return (x - proj.center) @ proj.basis.T


def reconstruct_pca(z, proj: PcaProjection) -> np.ndarray:
    return np.asarray(z, dtype=float) @ proj.basis + proj.center
