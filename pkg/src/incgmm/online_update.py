"""
One online round: classify a batch against the current mixture, pool new
and previous outliers, grow emerging clusters out of them with DBSCAN, fold
the round's normal points into the components with count-weighted moment
updates, merge components that tests cannot tell apart, and consolidate.

All functions are pure. ``online_step`` either returns a complete new state
or raises, leaving the caller's state untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core_math import GaussianComponent, MixtureModel, repair_psd
from .dbscan import NOISE, DbscanParams, dbscan, epsilon_heuristic, median_pairwise_distance
from .errors import ConfigError, InvalidModelError, ShapeError
from .offline_gmm import OUTLIER, OutlierStore, bic, em_fit
from .stat_tests import DEFAULT_SIGNIFICANCE, pairwise_equal

WEIGHT_RULES = ("counts", "blend")
MERGE_COVARIANCES = ("moment", "printed")
EPS_POLICIES = ("offline", "batch")


@dataclass(frozen=True)
class OnlineConfig:
    significance: float = DEFAULT_SIGNIFICANCE
    min_pts: int = 5
    eps_policy: str = "offline"
    eps_percentile: float = 0.90
    weight_rule: str = "counts"
    merge_covariance: str = "moment"
    merge: bool = True
    reclassify_passes: int = 10

    def __post_init__(self):
        if self.weight_rule not in WEIGHT_RULES:
            raise ConfigError(f"weight_rule must be one of {WEIGHT_RULES}")
        if self.merge_covariance not in MERGE_COVARIANCES:
            raise ConfigError(f"merge_covariance must be one of {MERGE_COVARIANCES}")
        if self.eps_policy not in EPS_POLICIES:
            raise ConfigError(f"eps_policy must be one of {EPS_POLICIES}")
        if not 0 < self.significance < 1:
            raise ConfigError("significance must lie in (0, 1)")
        if self.reclassify_passes < 0:
            raise ConfigError("reclassify_passes must be >= 0")


@dataclass(frozen=True)
class EmergingClusterSet:
    """Clusters found among the outliers, already refined by EM.

    ``components`` carry the adjusted weights (internal weight times
    ``N_emerging / (N_prev + N_emerging)``) and their soft member counts.
    ``member_indices`` index into the outlier store that was searched.
    """

    components: list
    internal_weights: np.ndarray
    member_indices: np.ndarray
    labels: np.ndarray
    eps: Optional[float] = None

    @property
    def n_members(self) -> int:
        return int(self.member_indices.shape[0])

    def __len__(self) -> int:
        return len(self.components)


@dataclass
class BatchResult:
    assignments: np.ndarray
    emerging_cluster_count: int
    merged_pairs: list
    model_after: MixtureModel
    outliers_after: OutlierStore
    initial_outliers: int = 0
    emerging: Optional[EmergingClusterSet] = None
    log: dict = field(default_factory=dict)

    @property
    def counts(self) -> np.ndarray:
        return self.model_after.counts


def _points(batch, d) -> np.ndarray:
    X = np.asarray(batch, dtype=float)
    if X.size == 0:
        return np.empty((0, d))
    X = np.atleast_2d(X)
    if X.shape[1] != d:
        raise ShapeError(f"batch has dimension {X.shape[1]}, model has {d}")
    return X


def _outlier_rule(ll, r, strict=True):
    return ll < r if strict else ll <= r


def classify_batch(model: MixtureModel, batch):
    """Assignments (component or ``OUTLIER``), outlier mask and per-component counts.

    Uses the strict rule ``ln p(x) < r``.
    """
    X = _points(batch, model.dim)
    if model.threshold is None:
        raise ConfigError("model has no outlier threshold")
    if X.shape[0] == 0:
        return np.empty(0, dtype=int), np.zeros(0, dtype=bool), np.zeros(model.n_components, int)
    resp, ll = model.posterior(X)
    out = _outlier_rule(ll, model.threshold)
    labels = np.where(out, OUTLIER, np.argmax(resp, axis=1))
    counts = np.bincount(labels[~out], minlength=model.n_components)
    return labels, out, counts


def _canonical_order(X) -> np.ndarray:
    # lexicographic order makes the store independent of batch permutation
    if X.shape[0] == 0:
        return np.empty(0, dtype=int)
    return np.lexsort(X.T[::-1])


def resolve_epsilon(outliers: OutlierStore, eps=None, clustered=None, min_pts=5,
                    percentile=0.90) -> Optional[float]:
    """Explicit ``eps``, else the heuristic on ``clustered``, else the median
    pairwise distance of the outliers."""
    if eps is not None:
        return float(eps)
    if clustered is not None and np.asarray(clustered).shape[0] > min_pts:
        return epsilon_heuristic(clustered, min_pts, percentile)
    if len(outliers) >= 2:
        value = median_pairwise_distance(outliers.vectors)
        return value if value > 0 else None
    return None


def _closest_pair(comps):
    best = None
    for i in range(len(comps)):
        for j in range(i + 1, len(comps)):
            a, b = comps[i], comps[j]
            pooled = (a.count * a.covariance + b.count * b.covariance) / (a.count + b.count)
            delta = a.mean - b.mean
            try:
                dist = float(delta @ np.linalg.solve(pooled, delta))
            except np.linalg.LinAlgError:
                dist = float(delta @ delta)
            if best is None or dist < best[0]:
                best = (dist, i, j)
    return best[1], best[2]


def _refine_emerging(Y, comps, prior_strength, prior_covariance) -> MixtureModel:
    """EM from the DBSCAN clusters, then from successively coarser starts
    (closest pair moment-merged); the lowest BIC wins, ties to fewer components."""
    n, d = Y.shape
    best = None
    while True:
        fit = em_fit(Y, comps, prior_strength=prior_strength, prior_covariance=prior_covariance)
        score = bic(fit.log_likelihood, len(comps), d, n)
        if best is None or score <= best[0]:
            best = (score, fit.model)
        if len(comps) == 1:
            return best[1]
        i, j = _closest_pair(comps)
        joined = merge_pair(comps[i], comps[j], "moment")
        comps = [c for k, c in enumerate(comps) if k not in (i, j)] + [joined]


def find_emerging(outliers: OutlierStore, eps=None, clustered=None, n_prev: float = 0.0,
                  min_pts: int = 5, percentile: float = 0.90, prior_strength: float = 0.0,
                  prior_covariance=None) -> EmergingClusterSet:
    """DBSCAN over the outliers, moment initialisation, joint EM refinement."""
    d = outliers.dim
    empty = EmergingClusterSet([], np.empty(0), np.empty(0, dtype=int),
                               np.full(len(outliers), NOISE, dtype=int), None)
    if len(outliers) < min_pts:
        return empty
    eps = resolve_epsilon(outliers, eps, clustered, min_pts, percentile)
    if eps is None:
        return empty
    labels = dbscan(outliers.vectors, DbscanParams(eps, min_pts))
    ids = sorted(set(labels.tolist()) - {NOISE})
    if not ids:
        return EmergingClusterSet([], np.empty(0), np.empty(0, dtype=int), labels, eps)
    members = np.flatnonzero(labels != NOISE)
    Y = outliers.vectors[members]
    n_em = Y.shape[0]
    comps = []
    for c in ids:
        pts = outliers.vectors[labels == c]
        diff = pts - pts.mean(axis=0)
        comps.append(GaussianComponent(pts.shape[0] / n_em, pts.mean(axis=0),
                                       diff.T @ diff / pts.shape[0], float(pts.shape[0])))
    if prior_covariance is None:
        prior_covariance = np.einsum("k,kij->ij", np.array([c.weight for c in comps]),
                                     np.array([c.covariance for c in comps]))
    refined = _refine_emerging(Y, comps, prior_strength, prior_covariance)
    internal = refined.weights / refined.weights.sum()
    scale = n_em / (n_prev + n_em)
    out = [
        GaussianComponent(float(w * scale), m, repair_psd(c), float(n))
        for w, m, c, n in zip(internal, refined.means, refined.covariances, refined.counts)
    ]
    return EmergingClusterSet(out, internal, members, labels, eps)


def extend_model(prev: MixtureModel, emerging: EmergingClusterSet) -> MixtureModel:
    """Append emerging components; previous weights shrink to make room."""
    if len(emerging) == 0:
        return prev
    n_prev = float(prev.counts.sum())
    n_em = float(emerging.n_members)
    scale = n_prev / (n_prev + n_em)
    em = emerging.components
    return prev.replace(
        weights=np.concatenate([prev.weights * scale, [c.weight for c in em]]),
        means=np.vstack([prev.means, [c.mean for c in em]]),
        covariances=np.concatenate([prev.covariances, [c.covariance for c in em]]),
        counts=np.concatenate([prev.counts, [c.count for c in em]]),
    )


@dataclass(frozen=True)
class ParameterUpdate:
    model: MixtureModel
    new_counts: np.ndarray  # hard counts of this round's normal points
    blend: np.ndarray  # w per component


def update_parameters(extended: MixtureModel, points, prev_counts,
                      weight_rule: str = "counts") -> ParameterUpdate:
    """Fold normal points into each component with count-based blending.

    ``w_i = N_new / (N_prev + N_new)`` uses hard counts; the new-data mean and
    covariance are the responsibility-weighted moments of ``points``.
    """
    X = _points(points, extended.dim)
    K = extended.n_components
    prev_counts = np.asarray(prev_counts, dtype=float)
    if prev_counts.shape != (K,):
        raise ShapeError("prev_counts must have one entry per component")
    if X.shape[0] == 0:
        return ParameterUpdate(extended, np.zeros(K), np.zeros(K))
    resp, _ = extended.posterior(X)
    mass = resp.sum(axis=0)
    hard = np.bincount(np.argmax(resp, axis=1), minlength=K).astype(float)
    means = extended.means.copy()
    covs = extended.covariances.copy()
    w = np.zeros(K)
    for i in range(K):
        if hard[i] == 0:
            continue
        w[i] = hard[i] / (prev_counts[i] + hard[i])
        mu_new = resp[:, i] @ X / mass[i]
        diff = X - mu_new
        cov_new = (resp[:, i, None] * diff).T @ diff / mass[i]
        mu_old = extended.means[i]
        mu = (1 - w[i]) * mu_old + w[i] * mu_new
        cov = (
            (1 - w[i]) * (extended.covariances[i] + np.outer(mu_old, mu_old))
            + w[i] * (cov_new + np.outer(mu_new, mu_new))
            - np.outer(mu, mu)
        )
        means[i] = mu
        covs[i] = repair_psd(cov)
    counts = prev_counts + hard
    if weight_rule == "counts":
        weights = counts / counts.sum() if hard.sum() > 0 else extended.weights
    elif weight_rule == "blend":
        weights = (1 - w) * extended.weights + w * mass / X.shape[0]
    else:
        raise ConfigError(f"unknown weight rule {weight_rule!r}")
    model = extended.replace(weights=weights, means=means, covariances=covs, counts=counts)
    return ParameterUpdate(model, hard, w)


def merge_pair(a: GaussianComponent, b: GaussianComponent,
               covariance: str = "moment") -> GaussianComponent:
    w = a.weight + b.weight
    if w > 0:
        wa, wb = a.weight / w, b.weight / w
    else:
        wa = wb = 0.5
    mu = wa * a.mean + wb * b.mean
    if covariance == "moment":
        cov = (wa * (a.covariance + np.outer(a.mean, a.mean))
               + wb * (b.covariance + np.outer(b.mean, b.mean)) - np.outer(mu, mu))
    elif covariance == "printed":
        cov = (wa * a.covariance + wb * b.covariance
               + wa * np.outer(a.mean, b.mean) + wb * np.outer(b.mean, a.mean))
    else:
        raise ConfigError(f"unknown merge covariance {covariance!r}")
    return GaussianComponent(w, mu, repair_psd(cov), a.count + b.count)


def merge_components(updated: MixtureModel, significance=DEFAULT_SIGNIFICANCE,
                     covariance: str = "moment"):
    """Greedy single pass over pairs in descending combined-count order.

    Returns ``(merged, unique, pairs)``: lists of components, and
    ``(i, j, k)`` triples meaning components i and j became merged[k].
    Each component takes part in at most one merge.
    """
    comps = updated.components
    K = len(comps)
    pairs = [(i, j) for i in range(K) for j in range(i + 1, K)]
    pairs.sort(key=lambda p: (-(comps[p[0]].count + comps[p[1]].count), p))
    equal = pairwise_equal(updated.means, updated.covariances, updated.counts, significance)
    used = set()
    merged, triples = [], []
    for i, j in pairs:
        if i in used or j in used:
            continue
        if equal[i, j]:
            used.update((i, j))
            triples.append((i, j, len(merged)))
            merged.append(merge_pair(comps[i], comps[j], covariance))
    unique = [(i, c) for i, c in enumerate(comps) if i not in used]
    return merged, unique, triples


def consolidate(template: MixtureModel, merged: list, unique: list) -> MixtureModel:
    """Merged components first, then unique ones; renormalise and advance the round.

    ``unique`` holds ``(original index, component)`` pairs or bare components.
    """
    comps = list(merged) + [c[1] if isinstance(c, tuple) else c for c in unique]
    if not comps:
        raise InvalidModelError("consolidation produced no components")
    w = np.array([c.weight for c in comps], dtype=float)
    if w.sum() <= 0:
        raise InvalidModelError("consolidated weights sum to zero")
    return template.replace(
        weights=w / w.sum(),
        means=np.array([c.mean for c in comps]),
        covariances=np.array([c.covariance for c in comps]),
        counts=np.array([c.count for c in comps]),
        round=template.round + 1,
    )


def online_step(model: MixtureModel, outliers: OutlierStore, batch,
                config: OnlineConfig = OnlineConfig()) -> BatchResult:
    """Run one online round and return the new state.

    Previously stored outliers are re-tested with ``<=`` (the rule they were
    flagged under); batch points use the strict ``<``.
    """
    d = model.dim
    X = _points(batch, d)
    if model.threshold is None:
        raise ConfigError("model has no outlier threshold")
    if len(outliers) and outliers.dim != d:
        raise ShapeError("outlier store dimension differs from the model")
    T = model.round + 1
    r = model.threshold

    # 1. classify the batch and pool outliers
    _, out0, _ = classify_batch(model, X)
    new_idx = np.flatnonzero(out0)
    new_idx = new_idx[_canonical_order(X[new_idx])]
    pooled = outliers.concat(OutlierStore.from_round(X[new_idx], T, new_idx))

    # 2. emerging clusters
    if config.eps_policy == "offline":
        eps, clustered = model.epsilon, None
    else:
        eps, clustered = None, X[~out0]
    n_prev = float(model.counts.sum())
    emerging = find_emerging(pooled, eps, clustered, n_prev, config.min_pts,
                             config.eps_percentile, model.prior_strength,
                             model.prior_covariance)
    extended = extend_model(model, emerging)
    prev_counts = np.concatenate([model.counts, np.zeros(len(emerging))])

    # 3. re-test previous outliers and the whole batch against the extended model
    R = np.vstack([outliers.vectors, X]) if len(outliers) else X
    origins = np.vstack([outliers.origins,
                         np.column_stack([np.full(X.shape[0], T), np.arange(X.shape[0])])])
    n_old = len(outliers)

    def flag(m):
        if not R.shape[0]:
            return np.zeros(0, dtype=bool)
        _, ll = m.posterior(R)
        return np.concatenate([ll[:n_old] <= r, ll[n_old:] < r])

    is_out = flag(extended)
    upd = update_parameters(extended, R[~is_out], prev_counts, config.weight_rule)
    # a component fitted on a DBSCAN core is too narrow, so its tails fail the
    # first test; re-test against the updated model until the normal set settles
    passes = 0
    for passes in range(1, config.reclassify_passes + 1):
        again = flag(upd.model)
        if np.array_equal(again, is_out):
            break
        is_out = again
        upd = update_parameters(extended, R[~is_out], prev_counts, config.weight_rule)

    # batch labels in extended indexing; after this the extended model can go
    n_ext = extended.n_components
    batch_normal = ~is_out[n_old:]
    ext_labels = np.argmax(extended.posterior(X[batch_normal])[0], axis=1) \
        if batch_normal.any() else np.empty(0, dtype=int)
    del extended

    # drop components that ended the round with nothing (only emerging ones can)
    updated = upd.model
    del upd
    keep = np.flatnonzero(updated.counts > 0)
    n_dropped = int(updated.n_components - keep.size)
    if keep.size < updated.n_components:
        updated = updated.replace(weights=updated.weights[keep] / updated.weights[keep].sum(),
                                  means=updated.means[keep],
                                  covariances=updated.covariances[keep],
                                  counts=updated.counts[keep])

    # 4. merge and consolidate
    if config.merge:
        merged, unique, triples = merge_components(updated, config.significance,
                                                   config.merge_covariance)
    else:
        merged, unique, triples = [], list(enumerate(updated.components)), []
    final = consolidate(updated, merged, unique)
    final.validate()

    # map extended index -> final index for the batch assignments
    to_final = np.full(n_ext, OUTLIER, dtype=int)
    for i, j, k in triples:
        to_final[keep[i]] = k
        to_final[keep[j]] = k
    for p, (i, _) in enumerate(unique):
        to_final[keep[i]] = len(merged) + p
    assignments = np.full(X.shape[0], OUTLIER, dtype=int)
    assignments[batch_normal] = to_final[ext_labels]

    store = OutlierStore(R[is_out], origins[is_out].astype(int)) if R.shape[0] \
        else OutlierStore.empty(d)
    log = {
        "round": T,
        "merge_covariance": config.merge_covariance,
        "weight_rule": config.weight_rule,
        "eps": emerging.eps,
        "emerging_members": emerging.n_members,
        "dropped_components": n_dropped,
        "reclassify_passes": passes,
    }
    return BatchResult(assignments, len(emerging), [(int(keep[i]), int(keep[j]), k)
                                                    for i, j, k in triples],
                       final, store, int(out0.sum()), emerging, log)
