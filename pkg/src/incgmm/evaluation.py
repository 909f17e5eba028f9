"""
Simulation harness: synthetic designs, the offline/online split protocol,
the full-batch GMM oracle, model-equivalence reports, the divergence
experiment and the incremental-vs-retrain cost benchmark.

Generator geometry (cluster centres and shapes) is fixed per design; the
``seed`` argument only drives sampling, so two seeds give two samples of the
same population.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core_math import MixtureModel
from .errors import ConfigError, IncGmmError, InsufficientDataError
from .offline_gmm import OfflineFit, OutlierStore, fit_offline, fit_standard_gmm
from .online_update import BatchResult, OnlineConfig, online_step
from .preprocessing import NormalizationStats, apply_normalization, fit_normalization
from .stat_tests import DEFAULT_SIGNIFICANCE, TestResult, covariance_w_test, hotelling_t2

# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    design: str
    seed: int
    centers: np.ndarray
    covariances: np.ndarray
    sizes: tuple

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.points[idx], self.labels[idx], self.design, self.seed,
                              self.centers, self.covariances, self.sizes)


def _sample(design, seed, centers, covs, sizes) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    for k, (mu, cov, n) in enumerate(zip(centers, covs, sizes)):
        pts.append(rng.multivariate_normal(mu, cov, size=n, method="cholesky"))
        labels.append(np.full(n, k))
    return LabeledDataset(np.vstack(pts), np.concatenate(labels), design, seed,
                          np.asarray(centers, float), np.asarray(covs, float), tuple(sizes))


def gen_unbalance(seed: int = 0) -> LabeledDataset:
    """2-D: three dense clusters of 2000 on the left, five sparse of 100 on the right."""
    centers = np.array([
        [-20.0, -15.0], [-20.0, 0.0], [-20.0, 15.0],
        [10.0, 10.0], [20.0, 10.0], [10.0, -10.0], [20.0, -10.0], [15.0, 0.0],
    ])
    covs = np.array([np.eye(2)] * 3 + [0.36 * np.eye(2)] * 5)
    return _sample("unbalance", seed, centers, covs, (2000,) * 3 + (100,) * 5)


def gen_dim_high(seed: int = 0) -> LabeledDataset:
    """32-D: 16 unit-variance clusters of 64 points, centres uniform in [0, 100]^32."""
    geometry = np.random.default_rng(3232)
    centers = geometry.uniform(0.0, 100.0, size=(16, 32))
    covs = np.array([np.eye(32)] * 16)
    return _sample("dimhigh", seed, centers, covs, (64,) * 16)


def gen_overlap3d(seed: int = 0) -> LabeledDataset:
    """3-D: five clusters (600, 500, 400, 300, 200).

    Clusters 0, 2, 3 and 4 overlap, with 2.8 to 3.3 sd between neighbouring
    centres. Cluster 1 sits about 6 sd from the others.
    """
    centers = np.array([
        [0.0, 0.0, 0.0],
        [-4.0, -4.0, 2.0],
        [2.8, 0.0, 0.0],
        [1.4, 2.6, 0.0],
        [1.2, 1.0, 2.7],
    ])
    covs = np.array([
        np.diag([1.0, 1.0, 1.0]),
        np.diag([1.0, 0.8, 1.2]),
        np.diag([0.8, 1.2, 1.0]),
        np.diag([1.0, 0.7, 1.1]),
        np.diag([0.9, 0.9, 0.6]),
    ])
    return _sample("overlap3d", seed, centers, covs, (600, 500, 400, 300, 200))


@dataclass(frozen=True)
class Design:
    name: str
    generator: Callable[[int], LabeledDataset]
    holdout_label: int
    holdout_offline_fraction: float
    other_offline_fraction: float
    n_online: int = 5
    alpha: float = 0.01


DESIGNS = {
    "unbalance": Design("unbalance", gen_unbalance, 0, 0.01, 0.85),
    "dimhigh": Design("dimhigh", gen_dim_high, 0, 0.10, 0.85),
    "overlap3d": Design("overlap3d", gen_overlap3d, 1, 0.01, 0.85),
}


def get_design(name: str) -> Design:
    try:
        return DESIGNS[name]
    except KeyError:
        raise ConfigError(f"unknown design {name!r}; choose from {sorted(DESIGNS)}") from None


@dataclass(frozen=True)
class DatasetSplit:
    offline: LabeledDataset
    online_sets: list
    offline_indices: np.ndarray
    online_indices: list


def split_protocol(data: LabeledDataset, holdout_label, holdout_offline_fraction: float,
                   other_offline_fraction: float, n_online: int, seed: int = 0) -> DatasetSplit:
    """Offline set = random picks from the held-out cluster and from the rest.

    ``round(fraction * size)`` points are drawn from each of the two pools;
    everything left is shuffled and dealt round-robin into ``n_online`` sets.
    ``holdout_label=None`` treats all points as one pool.
    """
    for f in (holdout_offline_fraction, other_offline_fraction):
        if not 0 <= f <= 1:
            raise ConfigError("offline fractions must lie in [0, 1]")
    if n_online < 1:
        raise ConfigError("n_online must be >= 1")
    rng = np.random.default_rng(seed)
    n = len(data)
    if holdout_label is None:
        held = np.zeros(n, dtype=bool)
    else:
        held = data.labels == holdout_label
    chosen = []
    for pool, frac in ((np.flatnonzero(held), holdout_offline_fraction),
                       (np.flatnonzero(~held), other_offline_fraction)):
        take = int(round(frac * pool.size))
        chosen.append(rng.choice(pool, size=take, replace=False))
    offline_idx = np.sort(np.concatenate(chosen))
    if offline_idx.size == 0:
        raise InsufficientDataError("split produced an empty offline set")
    rest = np.setdiff1d(np.arange(n), offline_idx)
    rest = rest[rng.permutation(rest.size)]
    online_idx = [np.sort(rest[i::n_online]) for i in range(n_online)]
    return DatasetSplit(data.subset(offline_idx), [data.subset(i) for i in online_idx],
                        offline_idx, online_idx)


def split_design(name: str, seed: int = 0, n_online: Optional[int] = None) -> DatasetSplit:
    design = get_design(name)
    data = design.generator(seed)
    return split_protocol(data, design.holdout_label, design.holdout_offline_fraction,
                          design.other_offline_fraction, n_online or design.n_online, seed)


# ---------------------------------------------------------------- oracle fit


def batch_gmm_fit(data, K: int, seed: int = 0, restarts: int = 5,
                  prior_strength=None) -> MixtureModel:
    """Standard EM on all data; counts are hard assignments."""
    X = np.atleast_2d(np.asarray(data, dtype=float))
    model = fit_standard_gmm(X, K, seed, restarts, prior_strength).model
    resp, _ = model.posterior(X)
    counts = np.bincount(np.argmax(resp, axis=1), minlength=K).astype(float)
    return model.replace(counts=counts)


# ---------------------------------------------------------------- incremental pipeline


@dataclass
class IncrementalRun:
    offline: OfflineFit
    stats: Optional[NormalizationStats]
    rounds: list
    model: MixtureModel
    outliers: OutlierStore

    @property
    def emerged_in(self) -> list:
        return [r.emerging_cluster_count for r in self.rounds]


def run_incremental(split: DatasetSplit, k: int, alpha: float = 0.01, seed: int = 0,
                    config: OnlineConfig = OnlineConfig(), normalize: bool = True,
                    after_round: Optional[Callable] = None) -> IncrementalRun:
    """Offline fit on ``split.offline`` followed by one round per online set."""
    stats = fit_normalization(split.offline.points) if normalize else None

    def prep(X):
        return apply_normalization(X, stats) if stats is not None else X

    off = fit_offline(prep(split.offline.points), alpha, k=k, seed=seed)
    model, store = off.model, off.outliers
    rounds = []
    for batch in split.online_sets:
        res = online_step(model, store, prep(batch.points), config)
        rounds.append(res)
        model, store = res.model_after, res.outliers_after
        if after_round is not None:
            after_round(len(rounds), res)
    return IncrementalRun(off, stats, rounds, model, store)


# ---------------------------------------------------------------- equivalence


@dataclass
class PairResult:
    a: int
    b: int
    distance: float
    mean_test: TestResult
    covariance_test: TestResult

    @property
    def equal(self) -> bool:
        return self.mean_test.equal and self.covariance_test.equal


def _finite_max(values) -> float:
    """Max over the testable pairs; NaN when no pair is testable."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size:
        return float(v.max())
    return float("nan") if len(values) else 0.0


@dataclass
class EquivalenceReport:
    pairs: list
    k_a: int
    k_b: int
    counts_a: np.ndarray
    counts_b: np.ndarray
    unmatched_a: list = field(default_factory=list)
    unmatched_b: list = field(default_factory=list)
    label_counts: Optional[tuple] = None

    @property
    def n_equal(self) -> int:
        return sum(p.equal for p in self.pairs)

    @property
    def n_mean_equal(self) -> int:
        return sum(p.mean_test.equal for p in self.pairs)

    @property
    def n_cov_equal(self) -> int:
        return sum(p.covariance_test.equal for p in self.pairs)

    @property
    def passed(self) -> bool:
        return self.k_a == self.k_b and all(p.equal for p in self.pairs)

    @property
    def max_w(self) -> float:
        return _finite_max([p.covariance_test.statistic for p in self.pairs])

    @property
    def max_t2(self) -> float:
        return _finite_max([p.mean_test.statistic for p in self.pairs])

    def to_dict(self) -> dict:
        out = {
            "passed": self.passed,
            "k_a": self.k_a,
            "k_b": self.k_b,
            "unmatched_a": self.unmatched_a,
            "unmatched_b": self.unmatched_b,
            "pairs": [
                {
                    "a": p.a, "b": p.b, "distance": p.distance,
                    "count_a": float(self.counts_a[p.a]), "count_b": float(self.counts_b[p.b]),
                    "t2": p.mean_test.statistic, "t2_p": p.mean_test.p_value,
                    "w": p.covariance_test.statistic, "w_p": p.covariance_test.p_value,
                    "equal": p.equal,
                }
                for p in self.pairs
            ],
        }
        if self.label_counts is not None:
            out["label_counts_a"] = [int(c) for c in self.label_counts[0]]
            out["label_counts_b"] = [int(c) for c in self.label_counts[1]]
        return out


def _pair_distance(mu1, cov1, n1, mu2, cov2, n2) -> float:
    pooled = ((n1 - 1) * cov1 + (n2 - 1) * cov2) / max(n1 + n2 - 2, 1.0)
    delta = mu1 - mu2
    try:
        return float(np.sqrt(delta @ np.linalg.solve(pooled, delta)))
    except np.linalg.LinAlgError:
        return float(np.linalg.norm(delta))


def _guarded(test, name, *args):
    # a pair the test cannot handle (too few points, singular pooled covariance) counts as unequal
    try:
        return test(*args)
    except IncGmmError:
        return TestResult(float("nan"), float("nan"), (), False, name)


def equivalence_report(a: MixtureModel, b: MixtureModel,
                       significance: float = DEFAULT_SIGNIFICANCE,
                       data=None, matching: str = "greedy") -> EquivalenceReport:
    """Pair components by pooled-covariance Mahalanobis distance and test each pair.

    ``matching`` is ``"greedy"`` (closest remaining pair first) or
    ``"hungarian"`` (minimum total distance). With ``data``, the report also
    carries the hard-label counts of those points under each model, reordered
    so that matched components line up.
    """
    D = np.array([[_pair_distance(a.means[i], a.covariances[i], a.counts[i],
                                  b.means[j], b.covariances[j], b.counts[j])
                   for j in range(b.n_components)] for i in range(a.n_components)])
    free_a, free_b = set(range(a.n_components)), set(range(b.n_components))
    if matching == "greedy":
        order = sorted(((D[i, j], i, j) for i in free_a for j in free_b))
    elif matching == "hungarian":
        rows, cols = linear_sum_assignment(D)
        order = [(D[i, j], int(i), int(j)) for i, j in zip(rows, cols)]
    else:
        raise ConfigError(f"matching must be 'greedy' or 'hungarian', got {matching!r}")
    pairs = []
    for dist, i, j in order:
        if i not in free_a or j not in free_b:
            continue
        free_a.discard(i)
        free_b.discard(j)
        t = _guarded(hotelling_t2, "hotelling_t2", a.means[i], a.covariances[i], a.counts[i],
                     b.means[j], b.covariances[j], b.counts[j], significance)
        w = _guarded(covariance_w_test, "box_m", a.covariances[i], a.counts[i],
                     b.covariances[j], b.counts[j], significance)
        pairs.append(PairResult(i, j, float(dist), t, w))
    pairs.sort(key=lambda p: p.a)
    label_counts = None
    if data is not None:
        X = np.atleast_2d(np.asarray(data, dtype=float))
        la = np.argmax(a.posterior(X)[0], axis=1)
        lb = np.argmax(b.posterior(X)[0], axis=1)
        ca = np.bincount(la, minlength=a.n_components)
        cb = np.bincount(lb, minlength=b.n_components)
        label_counts = (np.array([ca[p.a] for p in pairs]), np.array([cb[p.b] for p in pairs]))
    return EquivalenceReport(pairs, a.n_components, b.n_components, a.counts, b.counts,
                             sorted(free_a), sorted(free_b), label_counts)


def self_report(model: MixtureModel) -> EquivalenceReport:
    """Report of a model against itself, all statistics zero."""
    return equivalence_report(model, model)


# ---------------------------------------------------------------- divergence


@dataclass
class DivergenceCurve:
    design: str
    ratios: np.ndarray
    max_w: np.ndarray  # mean over seeds
    max_t2: np.ndarray
    per_seed_w: np.ndarray
    per_seed_t2: np.ndarray

    @staticmethod
    def _nondecreasing_fraction(y) -> float:
        # steps touching an untestable point are skipped
        steps = np.diff(y)
        steps = steps[np.isfinite(steps)]
        return float(np.mean(steps >= 0)) if steps.size else 1.0

    @staticmethod
    def _slopes(ratios, y, split=1.0):
        steps = np.diff(y)
        right = ratios[1:][np.isfinite(steps)]
        steps = steps[np.isfinite(steps)]
        before = steps[right <= split + 1e-9]
        after = steps[right > split + 1e-9]
        return (float(before.mean()) if before.size else 0.0,
                float(after.mean()) if after.size else 0.0)

    def summary(self) -> dict:
        out = {"design": self.design, "ratios": self.ratios.tolist(),
               "max_w": self.max_w.tolist(), "max_t2": self.max_t2.tolist()}
        for name, y in (("w", self.max_w), ("t2", self.max_t2)):
            before, after = self._slopes(self.ratios, y)
            out[f"{name}_nondecreasing_fraction"] = self._nondecreasing_fraction(y)
            out[f"{name}_slope_before"] = before
            out[f"{name}_slope_after"] = after
        return out


def divergence_experiment(data: LabeledDataset, n_online: int = 15,
                          online_fraction_of_offline: float = 0.10, seeds=(0, 1, 2),
                          alpha: float = 0.01, k: Optional[int] = None,
                          config: OnlineConfig = OnlineConfig()) -> DivergenceCurve:
    """Incremental model vs full retrain after every online set.

    The data are split at random into an offline part of size
    ``N / (1 + n_online * fraction)`` and ``n_online`` online sets. At ratio 0
    the offline model is compared with itself.
    """
    k = k or data.n_clusters
    n = len(data)
    ratios = np.arange(n_online + 1) * online_fraction_of_offline
    ws, ts = [], []
    for seed in seeds:
        frac = 1.0 / (1.0 + n_online * online_fraction_of_offline)
        split = split_protocol(data, None, 0.0, frac, n_online, seed)
        stats = fit_normalization(split.offline.points)
        off = fit_offline(apply_normalization(split.offline.points, stats), alpha, k=k,
                          seed=seed)
        model, store = off.model, off.outliers
        base = self_report(model)
        w_curve, t_curve = [base.max_w], [base.max_t2]
        seen = [split.offline.points]
        for batch in split.online_sets:
            res = online_step(model, store, apply_normalization(batch.points, stats), config)
            model, store = res.model_after, res.outliers_after
            seen.append(batch.points)
            retrain = batch_gmm_fit(apply_normalization(np.vstack(seen), stats), k, seed)
            rep = equivalence_report(model, retrain)
            w_curve.append(rep.max_w)
            t_curve.append(rep.max_t2)
        ws.append(w_curve)
        ts.append(t_curve)
    ws, ts = np.array(ws), np.array(ts)
    return DivergenceCurve(data.design, ratios, _column_mean(ws), _column_mean(ts), ws, ts)


def _column_mean(a: np.ndarray) -> np.ndarray:
    finite = np.isfinite(a)
    n = finite.sum(axis=0)
    total = np.where(finite, a, 0.0).sum(axis=0)
    return np.where(n > 0, total / np.maximum(n, 1), np.nan)


# ---------------------------------------------------------------- cost


@dataclass
class StageCost:
    stage: str
    method: str
    round: int
    seconds: float
    peak_bytes: int
    n_points: int


@dataclass
class CostReport:
    design: str
    stages: list
    memory_proxy: str = "tracemalloc peak of allocations made during the stage"

    def rows(self, method: str, stage: str = "online") -> list:
        return [s for s in self.stages if s.method == method and s.stage == stage]

    def to_dict(self) -> dict:
        return {"design": self.design, "memory_proxy": self.memory_proxy,
                "stages": [vars(s) for s in self.stages]}


def _measure(fn, repeats: int = 1):
    best = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        dt = time.perf_counter() - t0
        best = dt if best is None else min(best, dt)
    tracemalloc.start()
    tracemalloc.reset_peak()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return out, best, peak


def cost_benchmark(design: str = "dimhigh", seed: int = 0, n_online: int = 10,
                   alpha: float = 0.01, config: OnlineConfig = OnlineConfig(),
                   repeats: int = 3) -> CostReport:
    """Time and peak allocation per stage, incremental vs retrain-from-scratch.

    The offline stage is the same computation for both methods and is
    measured once. Each online round then costs one ``online_step`` for the
    incremental method, and one full standard-EM fit on all data seen so far
    for the retrain method. Wall times are the best of ``repeats`` runs;
    memory is measured in a separate run under tracemalloc.
    """
    split = split_design(design, seed, n_online)
    k_all = split.offline.n_clusters
    k_off = k_all - 1
    stats = fit_normalization(split.offline.points)
    X_off = apply_normalization(split.offline.points, stats)
    off, secs, peak = _measure(lambda: fit_offline(X_off, alpha, k=k_off, seed=seed))
    stages = [StageCost("offline", "incremental", 0, secs, peak, X_off.shape[0]),
              StageCost("offline", "retrain", 0, secs, peak, X_off.shape[0])]
    model, store = off.model, off.outliers
    seen = [X_off]
    for t, batch in enumerate(split.online_sets, start=1):
        Xb = apply_normalization(batch.points, stats)
        res, secs, peak = _measure(lambda: online_step(model, store, Xb, config), repeats)
        stages.append(StageCost("online", "incremental", t, secs, peak, Xb.shape[0]))
        model, store = res.model_after, res.outliers_after
        seen.append(Xb)
        allx = np.vstack(seen)
        _, secs, peak = _measure(lambda: batch_gmm_fit(allx, k_all, seed), 1)
        stages.append(StageCost("online", "retrain", t, secs, peak, allx.shape[0]))
    return CostReport(design, stages)
