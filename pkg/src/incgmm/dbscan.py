"""DBSCAN over accumulated outliers and the radius heuristic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import ConfigError, InsufficientDataError

NOISE = -1


@dataclass(frozen=True)
class DbscanParams:
    eps: float
    min_pts: int = 5

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"DBSCAN eps must be > 0, got {self.eps}")
        if self.min_pts < 1:
            raise ConfigError(f"DBSCAN min_pts must be >= 1, got {self.min_pts}")


def kth_neighbor_distances(points, k: int = 5) -> np.ndarray:
    """Euclidean distance from each point to its k-th nearest *other* point."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    if X.shape[0] <= k:
        raise InsufficientDataError(
            f"need more than {k} points for a {k}-th neighbour distance, got {X.shape[0]}"
        )
    dist, _ = cKDTree(X).query(X, k=k + 1)
    # column 0 is the point itself (distance 0); duplicates also give 0, which is correct
    return dist[:, k]


def epsilon_heuristic(clustered_points, k: int = 5, percentile: float = 0.90) -> float:
    """Percentile (linear interpolation) of the k-th neighbour distances."""
    return float(np.percentile(kth_neighbor_distances(clustered_points, k), 100 * percentile))


def dbscan(points, params: DbscanParams) -> np.ndarray:
    """Label each point with a cluster id (0, 1, ...) or ``NOISE``.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Clusters are the connected components of core points;
    cluster ids follow the smallest core index in each cluster. A border
    point joins the cluster of its lowest-index core neighbour.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    n = X.shape[0]
    labels = np.full(n, NOISE, dtype=int)
    if n == 0:
        return labels
    neighbors = _neighborhoods(X, params.eps)
    core = np.array([len(nb) >= params.min_pts for nb in neighbors])
    next_id = 0
    for start in range(n):
        if not core[start] or labels[start] != NOISE:
            continue
        labels[start] = next_id
        stack = [start]
        while stack:
            p = stack.pop()
            for q in neighbors[p]:
                if core[q] and labels[q] == NOISE:
                    labels[q] = next_id
                    stack.append(q)
        next_id += 1
    for p in np.flatnonzero(~core):
        core_nb = [q for q in neighbors[p] if core[q]]
        if core_nb:
            labels[p] = labels[min(core_nb)]
    return labels


def _neighborhoods(X, eps, chunk=1024):
    out = []
    for start in range(0, X.shape[0], chunk):
        D = cdist(X[start:start + chunk], X)
        out.extend(np.flatnonzero(row <= eps) for row in D)
    return out


def median_pairwise_distance(points) -> float:
    X = np.atleast_2d(np.asarray(points, dtype=float))
    if X.shape[0] < 2:
        raise InsufficientDataError("need at least 2 points for a pairwise distance")
    D = cdist(X, X)
    return float(np.median(D[np.triu_indices(X.shape[0], 1)]))
