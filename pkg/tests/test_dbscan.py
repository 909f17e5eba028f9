import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.cluster import DBSCAN as SkDBSCAN

from incgmm.dbscan import (
    NOISE,
    DbscanParams,
    dbscan,
    epsilon_heuristic,
    kth_neighbor_distances,
    median_pairwise_distance,
)
from incgmm.errors import ConfigError, InsufficientDataError


def brute_force_dbscan(X, eps, min_pts):
    """Textbook DBSCAN on a full distance matrix; clusters grown in index order."""
    n = len(X)
    D = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    nbrs = [set(np.flatnonzero(D[i] <= eps)) for i in range(n)]
    core = [len(nbrs[i]) >= min_pts for i in range(n)]
    labels = [NOISE] * n
    cid = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        queue = [i]
        labels[i] = cid
        while queue:
            p = queue.pop(0)
            for q in sorted(nbrs[p]):
                if core[q] and labels[q] == NOISE:
                    labels[q] = cid
                    queue.append(q)
        cid += 1
    out = list(labels)
    for i in range(n):
        if not core[i]:
            cores = sorted(q for q in nbrs[i] if core[q])
            if cores:
                out[i] = labels[cores[0]]
    return np.array(out)


def blobs(rng, centers, n_each, scale, n_scatter=0, box=30.0):
    parts = [rng.normal(c, scale, size=(n_each, len(c))) for c in centers]
    if n_scatter:
        parts.append(rng.uniform(-box, box, size=(n_scatter, len(centers[0]))))
    return np.vstack(parts)


def test_collinear_kth_distances():
    X = np.arange(6.0).reshape(-1, 1)
    np.testing.assert_array_equal(kth_neighbor_distances(X, 5), [5, 4, 3, 3, 4, 5])
    assert epsilon_heuristic(X, 5, 0.90) == pytest.approx(5.0)


def test_identical_points_give_zero_radius():
    X = np.ones((8, 2))
    assert epsilon_heuristic(X) == 0.0
    with pytest.raises(ConfigError):
        DbscanParams(0.0)


def test_grid_knn_matches_oracle():
    g = np.array([(i, j) for i in range(10) for j in range(10)], dtype=float)
    D = np.sqrt(((g[:, None] - g[None]) ** 2).sum(-1))
    oracle = np.sort(D, axis=1)[:, 5]
    np.testing.assert_array_equal(kth_neighbor_distances(g, 5), oracle)


def test_knn_needs_enough_points():
    with pytest.raises(InsufficientDataError):
        kth_neighbor_distances(np.zeros((5, 2)), 5)


def test_tight_blob_one_cluster(rng):
    X = rng.normal(scale=0.01, size=(10, 2))
    labels = dbscan(X, DbscanParams(1.0, 5))
    assert set(labels) == {0}


def test_isolated_points_all_noise():
    X = np.arange(10.0).reshape(-1, 1) * 10
    assert np.all(dbscan(X, DbscanParams(1.0, 5)) == NOISE)


def test_four_point_blob_is_noise(rng):
    X = rng.normal(scale=0.01, size=(4, 2))
    assert np.all(dbscan(X, DbscanParams(1.0, 5)) == NOISE)


def test_two_blobs_and_scatter(rng):
    X = np.vstack([rng.normal([0, 0], 1, size=(30, 2)), rng.normal([20, 0], 1, size=(30, 2)),
                   np.array([[10, 30], [-30, 10], [10, -30], [40, 40], [-40, -40.0]])])
    labels = dbscan(X, DbscanParams(2.5, 5))
    np.testing.assert_array_equal(labels, brute_force_dbscan(X, 2.5, 5))
    assert len(set(labels[:60])) == 2 and np.all(labels[60:] == NOISE)


@given(st.integers(0, 100_000), st.integers(1, 500), st.floats(0.3, 4.0),
       st.integers(1, 8))
def test_matches_brute_force(seed, n, eps, min_pts):
    rng = np.random.default_rng(seed)
    k = max(1, n // 60)
    X = blobs(rng, rng.uniform(-20, 20, size=(k, 2)), max(1, n - n // 5) // k, 1.5,
              n_scatter=n // 5)
    np.testing.assert_array_equal(dbscan(X, DbscanParams(eps, min_pts)),
                                  brute_force_dbscan(X, eps, min_pts))


@given(st.integers(0, 100_000))
def test_matches_brute_force_with_duplicates(seed):
    rng = np.random.default_rng(seed)
    X = np.round(rng.normal(size=(120, 3)) * 2) / 2  # lattice, many ties at exactly eps
    np.testing.assert_array_equal(dbscan(X, DbscanParams(0.5, 4)),
                                  brute_force_dbscan(X, 0.5, 4))


def _same_partition(a, b):
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))


@given(st.integers(0, 100_000))
def test_core_points_agree_with_sklearn(seed):
    rng = np.random.default_rng(seed)
    X = blobs(rng, [[0, 0], [8, 0], [0, 8]], 40, 1.0, n_scatter=20)
    ours = dbscan(X, DbscanParams(1.2, 5))
    sk = SkDBSCAN(eps=1.2, min_samples=5).fit(X)
    core = sk.core_sample_indices_
    assert _same_partition(ours[core], sk.labels_[core])
    np.testing.assert_array_equal(ours == NOISE, sk.labels_ == NOISE)


@given(st.integers(0, 100_000))
def test_permutation_invariant_up_to_ids(seed):
    rng = np.random.default_rng(seed)
    X = blobs(rng, [[0, 0], [6, 6]], 25, 1.0, n_scatter=10)
    labels = dbscan(X, DbscanParams(1.0, 5))
    p = rng.permutation(len(X))
    permuted = dbscan(X[p], DbscanParams(1.0, 5))
    core = np.array([np.sum(np.linalg.norm(X - x, axis=1) <= 1.0) >= 5 for x in X])
    # border points may legitimately switch between touching clusters; core points may not
    assert _same_partition(labels[p][core[p]], permuted[core[p]])
    np.testing.assert_array_equal(labels[p] == NOISE, permuted == NOISE)


@given(st.integers(0, 100_000))
def test_members_within_eps_of_a_core(seed):
    rng = np.random.default_rng(seed)
    X = blobs(rng, [[0, 0], [5, 0]], 30, 1.0, n_scatter=15)
    eps = 0.9
    labels = dbscan(X, DbscanParams(eps, 5))
    D = np.linalg.norm(X[:, None] - X[None], axis=-1)
    core = (D <= eps).sum(1) >= 5
    for i in np.flatnonzero(labels != NOISE):
        same = (labels == labels[i]) & core
        assert np.any(D[i, same] <= eps)


def test_median_pairwise_distance():
    assert median_pairwise_distance([[0.0], [1.0], [3.0]]) == 2.0
    with pytest.raises(InsufficientDataError):
        median_pairwise_distance([[0.0]])
