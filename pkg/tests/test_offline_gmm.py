import math

import numpy as np
import pytest
from scipy.optimize import minimize

from incgmm.core_math import MixtureModel
from incgmm.errors import ConfigError, DegenerateKError
from incgmm.offline_gmm import (
    KMEANS_RIDGE,
    OUTLIER,
    PenaltyMetric,
    _offset_step,
    bic,
    calibrate_pi,
    classify,
    classify_point,
    compute_threshold,
    em_fit,
    fit_offline,
    kmeans_init,
    n_parameters,
    robust_em_fit,
    select_k_bic,
    target_outlier_count,
)


def two_blobs(rng, n=150, sigma=0.5):
    a = rng.normal(scale=sigma, size=(n, 2)) + [-5, 0]
    b = rng.normal(scale=sigma, size=(n, 2)) + [5, 0]
    return np.vstack([a, b])


# ------------------------------------------------------------ k-means init


def test_kmeans_k1_is_global_moments(rng):
    X = rng.normal(size=(80, 3))
    (c,) = kmeans_init(X, 1, seed=0)
    assert c.weight == 1.0 and c.count == 80
    np.testing.assert_allclose(c.mean, X.mean(axis=0), atol=1e-12)
    ridge = KMEANS_RIDGE * np.trace(np.cov(X.T, bias=True)) / 3
    np.testing.assert_allclose(c.covariance, np.cov(X.T, bias=True) + ridge * np.eye(3),
                               atol=1e-12)


def test_kmeans_recovers_blob_centres(rng):
    comps = kmeans_init(two_blobs(rng), 2, seed=1)
    means = sorted(c.mean.tolist() for c in comps)
    np.testing.assert_allclose(means, [[-5, 0], [5, 0]], atol=0.1)
    assert sum(c.weight for c in comps) == pytest.approx(1.0)


def test_kmeans_saturated_k(rng):
    X = rng.normal(size=(6, 2))
    comps = kmeans_init(X, 6, seed=0)
    got = sorted(tuple(c.mean) for c in comps)
    assert got == sorted(tuple(x) for x in X)
    ridge = KMEANS_RIDGE * np.trace(np.cov(X.T, bias=True)) / 2
    for c in comps:
        np.testing.assert_allclose(c.covariance, ridge * np.eye(2), rtol=1e-12)


def test_kmeans_degenerate_k_raises():
    with pytest.raises(DegenerateKError):
        kmeans_init(np.ones((5, 2)), 2, seed=0)


def test_kmeans_is_seeded(rng):
    X = rng.normal(size=(200, 2))
    a, b = kmeans_init(X, 4, seed=7), kmeans_init(X, 4, seed=7)
    for ca, cb in zip(a, b):
        assert np.array_equal(ca.mean, cb.mean) and np.array_equal(ca.covariance, cb.covariance)


# ------------------------------------------------------------ robust EM


def fit_pair(rng):
    X = two_blobs(rng)
    return X, kmeans_init(X, 2, seed=0)


def test_large_pi_matches_standard_em(rng):
    X, init = fit_pair(rng)
    robust = robust_em_fit(X, 1e6, init)
    plain = em_fit(X, init)
    assert not robust.outlier_mask.any()
    for name in ("weights", "means", "covariances"):
        np.testing.assert_allclose(getattr(robust.model, name), getattr(plain.model, name),
                                   atol=1e-6)


def test_zero_pi_makes_every_point_an_outlier(rng):
    X, init = fit_pair(rng)
    fit = robust_em_fit(X, 0.0, init, max_iters=5)
    assert fit.outlier_mask.all()


def test_negative_pi_rejected(rng):
    X, init = fit_pair(rng)
    with pytest.raises(ConfigError):
        robust_em_fit(X, -1.0, init)


def test_planted_outliers_recovered(rng):
    X = two_blobs(rng, n=200)
    planted = np.array([[0, 6], [0, -6], [12, 5], [-12, -5], [0, 0]], dtype=float)
    data = np.vstack([X, planted])
    fit = robust_em_fit(data, 4.0, kmeans_init(X, 2, seed=0))
    mask = fit.outlier_mask
    assert mask[-5:].all()
    assert mask[:-5].sum() <= 4


@pytest.mark.parametrize("pi", [math.inf, 6.0, 2.0])
def test_objective_never_increases(rng, pi):
    X, init = fit_pair(rng)
    X = np.vstack([X, [[0, 4], [1, -4]]])
    fit = em_fit(X, init) if math.isinf(pi) else robust_em_fit(X, pi, init)
    steps = np.diff(fit.report.objective)
    assert np.all(steps <= 1e-8), steps.max()
    assert fit.report.converged and not fit.report.diverged


def test_weights_and_posteriors_normalised(rng):
    X, init = fit_pair(rng)
    fit = robust_em_fit(X, 3.0, init)
    assert fit.model.weights.sum() == pytest.approx(1.0, abs=1e-8)
    resp, _ = fit.model.posterior(X)
    np.testing.assert_allclose(resp.sum(axis=1), 1.0, atol=1e-10)


def test_offset_step_is_exact_minimiser(rng):
    d, K, n = 3, 2, 6
    X = rng.normal(scale=3.0, size=(n, d))
    means = rng.normal(size=(K, d))
    precisions = []
    for _ in range(K):
        a = rng.normal(size=(d, d))
        precisions.append(a @ a.T + d * np.eye(d))
    precisions = np.array(precisions)
    resp = rng.dirichlet(np.ones(K), size=n)
    S = []
    for _ in range(n):
        a = rng.normal(size=(d, d))
        S.append(a @ a.T + np.eye(d))
    metric = PenaltyMetric(np.linalg.cholesky(np.array(S)))
    pi = 1.5
    offsets, crit = _offset_step(X, resp, means, precisions, pi, metric)
    for i in range(n):
        A = np.einsum("k,kij->ij", resp[i], precisions)
        b = sum(resp[i, k] * precisions[k] @ (X[i] - means[k]) for k in range(K))
        Sinv = np.linalg.inv(S[i])

        def f(o):
            return 0.5 * o @ A @ o - b @ o + pi * np.sqrt(o @ Sinv @ o)

        if crit[i] <= pi:
            assert not offsets[i].any()
            continue
        ref = minimize(f, np.linalg.solve(A, b), method="BFGS",
                       options={"gtol": 1e-12, "maxiter": 10_000})
        assert f(offsets[i]) <= ref.fun + 1e-9
        np.testing.assert_allclose(offsets[i], ref.x, atol=1e-5)


def test_em_matches_sklearn(rng):
    sklearn = pytest.importorskip("sklearn.mixture")
    X, init = fit_pair(rng)
    ours = em_fit(X, init, prior_strength=0.0, max_iters=2000, tol=1e-14).model
    ref = sklearn.GaussianMixture(
        2, covariance_type="full", reg_covar=0.0, tol=1e-14, max_iter=2000,
        weights_init=[c.weight for c in init], means_init=[c.mean for c in init],
        precisions_init=[np.linalg.inv(c.covariance) for c in init]).fit(X)
    np.testing.assert_allclose(ours.weights, ref.weights_, atol=1e-6)
    np.testing.assert_allclose(ours.means, ref.means_, atol=1e-6)
    np.testing.assert_allclose(ours.covariances, ref.covariances_, atol=1e-6)


# ------------------------------------------------------------ K selection


def test_bic_formula():
    assert n_parameters(3, 2) == 2 + 6 + 9
    assert bic(-100.0, 3, 2, 50) == pytest.approx(200 + 17 * math.log(50))


def test_single_blob_selects_one(rng):
    X = rng.normal(size=(300, 2)) @ np.array([[1.0, 0.3], [0.0, 0.6]])
    k, fits = select_k_bic(X, range(1, 5), seed=0)
    assert k == 1
    assert set(fits) == {1, 2, 3, 4}
    table = {K: bic(f.log_likelihood, K, 2, 300) for K, (f, _) in fits.items()}
    assert min(table, key=lambda K: (table[K], K)) == k


def test_bic_prefers_true_k_for_separated_blobs(rng):
    k, _ = select_k_bic(two_blobs(rng), range(1, 5), seed=0)
    assert k == 2


# ------------------------------------------------------------ calibration and threshold


def test_target_count_rounding():
    assert target_outlier_count(0.01, 100) == 1
    assert target_outlier_count(0.01, 101) == 2
    assert target_outlier_count(1 / 7, 7) == 1
    assert target_outlier_count(0.0, 500) == 0


def test_calibration_zero_target_keeps_empty_outlier_set(rng):
    X = two_blobs(rng)
    cal = calibrate_pi(X, 2, 0.0, seed=0)
    assert cal.target == 0 and not cal.fit.outlier_mask.any()
    assert len(cal.history) == 1


def test_calibration_reaches_target(rng):
    X = np.vstack([two_blobs(rng), rng.uniform(-10, 10, size=(6, 2))])
    cal = calibrate_pi(X, 2, 0.02, seed=0)
    count = int(cal.fit.outlier_mask.sum())
    assert count >= cal.target == 7
    pis = [p for p, _ in cal.history]
    assert cal.pi in pis


def test_threshold_at_one_over_n_is_minimum(rng):
    X, init = fit_pair(rng)
    model = em_fit(X, init).model
    assert compute_threshold(model, X, 1 / len(X)) == model.log_likelihood(X).min()
    with pytest.raises(ConfigError):
        compute_threshold(model, X, 0.0)


def test_offline_fit_flags_exactly_target(rng):
    X = np.vstack([two_blobs(rng), rng.uniform(-10, 10, size=(6, 2))])
    off = fit_offline(X, 0.03, k=2, seed=0)
    target = target_outlier_count(0.03, len(X))
    assert len(off.outliers) == target
    labels = classify(off.model, X)
    assert np.sum(labels == OUTLIER) == target
    assert np.array_equal(np.flatnonzero(labels == OUTLIER), np.sort(off.outliers.origins[:, 1]))
    assert off.model.round == 0
    assert off.model.weights.sum() == pytest.approx(1.0, abs=1e-8)


def test_classify_point_rules(rng):
    X, init = fit_pair(rng)
    model = em_fit(X, init).model
    model = model.replace(threshold=compute_threshold(model, X, 0.01))
    heavy = int(np.argmax(model.weights))
    assert classify_point(model, model.means[heavy]) == heavy
    far = np.array([0.0, 10 * math.sqrt(model.covariances[:, 1, 1].max())])
    assert classify_point(model, far) == OUTLIER


def test_boundary_point_is_outlier(rng):
    X, init = fit_pair(rng)
    model = em_fit(X, init).model
    x = X[:1]
    model = model.replace(threshold=float(model.log_likelihood(x)[0]))
    assert classify(model, x)[0] == OUTLIER
    assert classify(model, x, strict=True)[0] != OUTLIER


def test_fit_is_deterministic(rng):
    X = np.vstack([two_blobs(rng), rng.uniform(-10, 10, size=(4, 2))])
    a, b = fit_offline(X, 0.02, k=2, seed=3), fit_offline(X, 0.02, k=2, seed=3)
    assert np.array_equal(a.model.means, b.model.means)
    assert np.array_equal(a.model.covariances, b.model.covariances)
    assert a.model.threshold == b.model.threshold


def test_prior_covariance_used_for_density(rng):
    X, init = fit_pair(rng)
    model = em_fit(X, init).model
    assert isinstance(model, MixtureModel)
    n, kappa = model.counts[0], model.prior_strength
    want = (n * model.covariances[0] + kappa * model.prior_covariance) / (n + kappa)
    np.testing.assert_allclose(model.density_covariances[0], want, rtol=1e-12)
