"""Command-line interface.

Every failure prints one JSON error record on stderr and exits with the
code of its error family: 2 data, 3 numerical, 4 configuration.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import evaluation as ev
from .errors import ConfigError, DataError, IncGmmError, NumericalError
from .io import (
    BatchManifest,
    ModelBundle,
    Preprocessor,
    load_bundle,
    load_csv,
    load_model,
    save_bundle,
    save_csv,
    to_input_space,
    write_report,
)
from .offline_gmm import RESTARTS, fit_offline, target_outlier_count
from .online_update import EPS_POLICIES, MERGE_COVARIANCES, WEIGHT_RULES, OnlineConfig, \
    classify_batch, online_step
from .preprocessing import apply_normalization, fit_normalization, fit_pca
from .stat_tests import DEFAULT_SIGNIFICANCE

ONLINE_KEYS = ("significance", "min_pts", "eps_policy", "eps_percentile", "weight_rule",
               "merge_covariance", "merge", "reclassify_passes")


def _parse_k_range(text):
    try:
        lo, hi = (int(p) for p in text.split(".."))
    except ValueError:
        raise ConfigError(f"--k-range must look like LO..HI, got {text!r}") from None
    if not 1 <= lo <= hi:
        raise ConfigError(f"--k-range needs 1 <= LO <= HI, got {text!r}")
    return list(range(lo, hi + 1))


def _parse_ints(text):
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _online_config(saved: dict, **overrides) -> OnlineConfig:
    values = {k: saved[k] for k in ONLINE_KEYS if k in saved}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return OnlineConfig(**values)


def _config_echo(cfg: OnlineConfig, **extra) -> dict:
    out = {k: getattr(cfg, k) for k in ONLINE_KEYS}
    out.update(extra)
    return out


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(package_name="artifact")
def cli():
    """Incremental Gaussian-mixture clustering with outlier detection."""


online_options = [
    click.option("--significance", type=float, default=None,
                 help="Level of the merge tests (default 0.05)."),
    click.option("--min-pts", type=int, default=None, help="DBSCAN MinPts (default 5)."),
    click.option("--eps-policy", type=click.Choice(EPS_POLICIES), default=None,
                 help="Where the DBSCAN radius comes from (default offline)."),
    click.option("--merge-covariance", type=click.Choice(MERGE_COVARIANCES), default=None,
                 help="Merged covariance formula (default moment)."),
    click.option("--weight-rule", type=click.Choice(WEIGHT_RULES), default=None,
                 help="Weight update rule (default counts)."),
]


def with_online_options(fn):
    for opt in reversed(online_options):
        fn = opt(fn)
    return fn


@cli.command("fit-offline")
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False))
@click.option("--alpha", required=True, type=float, help="Target offline outlier fraction.")
@click.option("--k", type=int, default=None, help="Number of components.")
@click.option("--k-range", default=None, help="Select K by BIC over LO..HI.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--restarts", type=int, default=RESTARTS, show_default=True)
@click.option("--pca", "pca_fraction", type=float, default=None,
              help="Project onto the leading components explaining this variance fraction.")
@click.option("--normalize/--no-normalize", default=True, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--report", default=None, type=click.Path(dir_okay=False),
              help="Fit report path (default OUT.report.json).")
@with_online_options
def fit_offline_cmd(data_path, alpha, k, k_range, seed, restarts, pca_fraction, normalize,
                    out, report, **online):
    """Fit the initial robust mixture, calibrate pi and set the threshold."""
    if (k is None) == (k_range is None):
        raise ConfigError("give exactly one of --k and --k-range")
    if not 0 < alpha < 0.5:
        raise ConfigError(f"--alpha must lie in (0, 0.5), got {alpha}")
    cfg = _online_config({}, **online)
    X = load_csv(data_path)
    stats = fit_normalization(X) if normalize else None
    Z = apply_normalization(X, stats) if stats is not None else X
    pca = fit_pca(Z, pca_fraction) if pca_fraction is not None else None
    prep = Preprocessor(stats, pca)
    Z = prep(X)
    fit = fit_offline(Z, alpha, k=k, k_range=_parse_k_range(k_range) if k_range else None,
                      seed=seed, restarts=restarts, min_pts=cfg.min_pts,
                      eps_percentile=cfg.eps_percentile)
    config = _config_echo(cfg, alpha=alpha, seed=seed, restarts=restarts,
                          pca_fraction=pca_fraction, normalize=normalize)
    manifest = BatchManifest().append(os.fspath(data_path), _mtime(data_path))
    save_bundle(ModelBundle(fit.model, prep, config, fit.outliers, manifest), out)
    summary = fit.summary()
    summary.update(n=int(Z.shape[0]), dimension=int(Z.shape[1]), alpha=alpha,
                   expected_outliers=target_outlier_count(alpha, Z.shape[0]),
                   model=os.fspath(out))
    write_report(report or f"{out}.report.json", summary)
    click.echo(json.dumps({"k": fit.k, "offline_outliers": len(fit.outliers),
                           "threshold": fit.model.threshold}))


def _mtime(path) -> float:
    return Path(path).stat().st_mtime


@cli.command("update")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--batch", "batch_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--report", default=None, type=click.Path(dir_okay=False),
              help="Round report path (default OUT.report.json).")
@click.option("--timestamp", type=float, default=None,
              help="Ingestion time in Unix seconds (default: batch file mtime).")
@with_online_options
def update_cmd(model_path, batch_path, out, report, timestamp, **online):
    """Run one online round; the input model is never modified."""
    bundle = load_bundle(model_path)
    if bundle.model.threshold is None:
        raise ConfigError("model has no outlier threshold; fit it with fit-offline")
    cfg = _online_config(bundle.config, **online)
    X = load_csv(batch_path)
    if bundle.prep.input_dim is not None and X.shape[1] != bundle.prep.input_dim:
        raise DataError(f"batch has {X.shape[1]} columns, model expects {bundle.prep.input_dim}")
    if timestamp is None:
        stamp = bundle.manifest.next_timestamp(_mtime(batch_path))
    else:
        stamp = timestamp
    manifest = bundle.manifest.append(os.fspath(batch_path), stamp)
    res = online_step(bundle.model, bundle.outliers, bundle.prep(X), cfg)
    config = dict(bundle.config)
    config.update(_config_echo(cfg))
    report_tree = {
        "round": res.model_after.round,
        "k": res.model_after.n_components,
        "batch_size": int(X.shape[0]),
        "initial_outliers": res.initial_outliers,
        "emerging_clusters": res.emerging_cluster_count,
        "merged_pairs": [list(p) for p in res.merged_pairs],
        "outliers_stored": len(res.outliers_after),
        "counts": res.model_after.counts,
        "batch_assignments": np.bincount(res.assignments + 1,
                                         minlength=res.model_after.n_components + 1)[1:],
        "batch_outliers": int(np.sum(res.assignments < 0)),
        "log": res.log,
    }
    save_bundle(ModelBundle(res.model_after, bundle.prep, config, res.outliers_after,
                            manifest), out)
    write_report(report or f"{out}.report.json", report_tree)
    click.echo(json.dumps({"round": report_tree["round"], "k": report_tree["k"],
                           "emerging": res.emerging_cluster_count,
                           "merged": len(res.merged_pairs)}))


@cli.command("detect")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def detect_cmd(model_path, data_path, out):
    """Classify points against a model without changing it."""
    model, prep, _ = load_model(model_path)
    if model.threshold is None:
        raise ConfigError("model has no outlier threshold")
    Z = prep(load_csv(data_path))
    labels, is_out, counts = classify_batch(model, Z)
    _, ll = model.posterior(Z) if Z.shape[0] else (None, np.zeros(0))
    write_report(out, {
        "n": int(Z.shape[0]),
        "threshold": model.threshold,
        "n_outliers": int(is_out.sum()),
        "counts": counts,
        "points": [
            {"index": i, "log_likelihood": float(ll[i]), "component": int(labels[i]),
             "outlier": bool(is_out[i])}
            for i in range(Z.shape[0])
        ],
    })
    click.echo(json.dumps({"n": int(Z.shape[0]), "outliers": int(is_out.sum())}))


@cli.command("fit-batch")
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False))
@click.option("--k", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--restarts", type=int, default=RESTARTS, show_default=True)
@click.option("--prep-from", "prep_from", default=None, type=click.Path(dir_okay=False),
              help="Reuse the preprocessing stored in this model file.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def fit_batch_cmd(data_path, k, seed, restarts, prep_from, out):
    """Fit a standard mixture on all data at once (the comparison oracle)."""
    X = load_csv(data_path)
    prep = load_model(prep_from)[1] if prep_from else Preprocessor(fit_normalization(X))
    model = ev.batch_gmm_fit(prep(X), k, seed, restarts)
    save_bundle(ModelBundle(model, prep, {"seed": seed, "restarts": restarts}), out)
    click.echo(json.dumps({"k": model.n_components}))


@cli.command("compare")
@click.option("--model-a", "a_path", required=True, type=click.Path(dir_okay=False))
@click.option("--model-b", "b_path", required=True, type=click.Path(dir_okay=False))
@click.option("--significance", type=float, default=DEFAULT_SIGNIFICANCE, show_default=True)
@click.option("--data", "data_path", default=None, type=click.Path(dir_okay=False),
              help="Raw data for per-component hard-label counts.")
@click.option("--matching", type=click.Choice(["greedy", "hungarian"]), default="greedy",
              show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def compare_cmd(a_path, b_path, significance, data_path, matching, out):
    """Pair components of two models and test each pair for equality."""
    if not 0 < significance < 1:
        raise ConfigError("--significance must lie in (0, 1)")
    a, prep_a, _ = load_model(a_path)
    b, prep_b, _ = load_model(b_path)
    if prep_a.same_as(prep_b):
        prep = prep_a
    else:
        a, b = to_input_space(a, prep_a), to_input_space(b, prep_b)
        prep = Preprocessor()
    if a.dim != b.dim:
        raise DataError(f"models have dimensions {a.dim} and {b.dim}")
    data = prep(load_csv(data_path)) if data_path else None
    rep = ev.equivalence_report(a, b, significance, data, matching)
    tree = rep.to_dict()
    tree["significance"] = significance
    write_report(out, tree)
    click.echo(json.dumps({"passed": rep.passed, "pairs_equal": rep.n_equal,
                           "k_a": rep.k_a, "k_b": rep.k_b}))
    if not rep.passed:
        sys.exit(1)


@cli.command("simulate")
@click.option("--design", type=click.Choice(sorted(ev.DESIGNS)), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n-online", type=int, default=None, help="Number of online sets.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def simulate_cmd(design, seed, n_online, out_dir):
    """Generate a design and write its offline/online split as CSV files."""
    split = ev.split_design(design, seed, n_online)
    full = ev.get_design(design).generator(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = full.points.shape[1]
    header = [f"x{j}" for j in range(d)]

    def write(name, ds):
        save_csv(out / f"{name}.csv", ds.points, header)
        save_csv(out / f"{name}_labels.csv", ds.labels.reshape(-1, 1), ["label"])

    write("full", full)
    write("offline", split.offline)
    for t, batch in enumerate(split.online_sets, start=1):
        write(f"online_{t}", batch)
    info = {"design": design, "seed": seed, "dimension": d, "n_clusters": full.n_clusters,
            "offline_size": len(split.offline),
            "online_sizes": [len(b) for b in split.online_sets],
            "alpha": ev.get_design(design).alpha}
    write_report(out / "design.json", info)
    click.echo(json.dumps(info))


@cli.command("bench")
@click.option("--design", type=click.Choice(sorted(ev.DESIGNS)), default="dimhigh",
              show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--rounds", type=int, default=10, show_default=True)
@click.option("--repeats", type=int, default=3, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def bench_cmd(design, seed, rounds, repeats, out):
    """Time and memory of incremental rounds against full retraining."""
    rep = ev.cost_benchmark(design, seed, rounds, repeats=repeats)
    write_report(out, rep.to_dict())
    inc = rep.rows("incremental")
    ret = rep.rows("retrain")
    click.echo(json.dumps({
        "mean_online_seconds": float(np.mean([s.seconds for s in inc])),
        "mean_retrain_seconds": float(np.mean([s.seconds for s in ret])),
    }))


@cli.command("diverge")
@click.option("--design", type=click.Choice(sorted(ev.DESIGNS)), required=True)
@click.option("--ratios", default=None,
              help="Evenly spaced cumulative ratios, e.g. 0.1,0.2,...; "
                   "overrides --n-online/--fraction.")
@click.option("--n-online", type=int, default=15, show_default=True)
@click.option("--fraction", type=float, default=0.10, show_default=True,
              help="Size of each online set relative to the offline set.")
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def diverge_cmd(design, ratios, n_online, fraction, seeds, out):
    """Track how far the incremental model drifts from a full retrain."""
    if ratios:
        n_online, fraction = _ratio_grid(ratios)
    if n_online < 1 or not fraction > 0:
        raise ConfigError("need at least one online set and a positive fraction")
    data = ev.get_design(design).generator(_parse_ints(seeds)[0])
    curve = ev.divergence_experiment(data, n_online, fraction, _parse_ints(seeds))
    write_report(out, curve.to_dict())
    click.echo(json.dumps(curve.summary()))


def _ratio_grid(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--ratios must be comma-separated numbers, got {text!r}") from None
    if not vals or vals[0] <= 0:
        raise ConfigError("--ratios must start with a positive step")
    step = vals[0]
    expected = step * np.arange(1, len(vals) + 1)
    if not np.allclose(vals, expected, rtol=1e-9, atol=1e-12):
        raise ConfigError("--ratios must be evenly spaced multiples of the first value")
    return len(vals), step


def _fail(exc: IncGmmError) -> int:
    click.echo(json.dumps(exc.to_record()), err=True)
    return exc.exit_code


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="incgmm", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo(json.dumps({"error": "aborted", "message": "aborted"}), err=True)
        return 1
    except click.ClickException as exc:
        return _fail(ConfigError(exc.format_message()))
    except IncGmmError as exc:
        return _fail(exc)
    except np.linalg.LinAlgError as exc:
        return _fail(NumericalError(f"linear algebra failure: {exc}"))
    except OSError as exc:
        return _fail(DataError(f"{exc.strerror or exc}: {exc.filename or ''}".strip()))
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    return 0


def entry() -> None:
    sys.exit(main())
