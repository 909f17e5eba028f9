"""CSV ingestion, model files and their sidecars.

A model lives in three files that are written together:

* ``MODEL`` - JSON model file (parameters, threshold, round, preprocessing,
  config echo). Its size depends on K and d only.
* ``MODEL.outliers.csv`` - the accumulated outlier store.
* ``MODEL.manifest.json`` - the ordered list of ingested batch files.

Floats are written with ``repr``, the shortest decimal string that parses
back to the same double, so every value round-trips exactly.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core_math import MixtureModel
from .errors import ConfigError, DataError, ParseError, ShapeError, UnsupportedVersionError
from .offline_gmm import OutlierStore
from .preprocessing import (
    NormalizationStats,
    PcaProjection,
    apply_normalization,
    apply_pca,
)

SCHEMA = "incgmm-model"
SCHEMA_VERSION = 1
MANIFEST_SCHEMA = "incgmm-manifest"
OUTLIER_SUFFIX = ".outliers.csv"
MANIFEST_SUFFIX = ".manifest.json"


# ---------------------------------------------------------------- atomic writes


def _temp_beside(path: Path) -> Path:
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    os.close(fd)
    return Path(tmp)


def _write_temp(path: Path, text: str) -> Path:
    tmp = _temp_beside(path)
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return tmp


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    os.replace(_write_temp(path, text), path)


def atomic_write_many(items: dict) -> None:
    """Write every ``{path: text}`` to a temp file first, then rename them all."""
    staged = []
    try:
        for path, text in items.items():
            staged.append((_write_temp(Path(path), text), Path(path)))
    except BaseException:
        for tmp, _ in staged:
            tmp.unlink(missing_ok=True)
        raise
    for tmp, path in staged:
        os.replace(tmp, path)


# ---------------------------------------------------------------- CSV


def format_float(v) -> str:
    return repr(float(v))


def load_csv(path, return_header: bool = False):
    """Read a numeric CSV with a header row into an ``(n, d)`` array.

    Row numbers in errors are 1-based file lines (the header is line 1).
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise ParseError(f"{path}: missing header row", row=1)
        header = [h.strip() for h in header]
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ShapeError(
                    f"{path}:{line}: expected {len(header)} columns, got {len(row)}"
                )
            values = []
            for col, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}:{line}: column {col!r} is not numeric: {cell!r}",
                                     row=line, column=col) from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}:{line}: column {col!r} is not finite: {cell!r}",
                                     row=line, column=col)
                values.append(v)
            rows.append(values)
    X = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return (header, X) if return_header else X


def csv_text(X, header=None) -> str:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.size == 0 and X.ndim == 2 and header is not None:
        X = X.reshape(0, len(header))
    if header is None:
        header = [f"x{j}" for j in range(X.shape[1])]
    if len(header) != X.shape[1]:
        raise ShapeError("header length does not match the number of columns")
    lines = [",".join(header)]
    lines.extend(",".join(format_float(v) for v in row) for row in X)
    return "\n".join(lines) + "\n"


def save_csv(path, X, header=None) -> None:
    atomic_write_text(path, csv_text(X, header))


# ---------------------------------------------------------------- preprocessing


@dataclass(frozen=True)
class Preprocessor:
    """Normalization followed by an optional PCA projection."""

    stats: Optional[NormalizationStats] = None
    pca: Optional[PcaProjection] = None

    @property
    def input_dim(self) -> Optional[int]:
        if self.stats is not None:
            return self.stats.dim
        if self.pca is not None:
            return self.pca.center.shape[0]
        return None

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.stats is not None:
            X = apply_normalization(X, self.stats)
        if self.pca is not None:
            X = apply_pca(X, self.pca)
        return X

    def same_as(self, other: "Preprocessor") -> bool:
        return _prep_dict(self) == _prep_dict(other)


def _arr(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


def _prep_dict(p: Preprocessor) -> dict:
    out = {"normalization": None, "pca": None}
    if p.stats is not None:
        out["normalization"] = {"means": _arr(p.stats.means), "stddevs": _arr(p.stats.stddevs)}
    if p.pca is not None:
        out["pca"] = {
            "basis": _arr(p.pca.basis),
            "center": _arr(p.pca.center),
            "explained_fraction": float(p.pca.explained_fraction),
            "eigenvalues": _arr(p.pca.eigenvalues),
        }
    return out


def _prep_from(tree) -> Preprocessor:
    stats = pca = None
    if tree.get("normalization") is not None:
        n = tree["normalization"]
        stats = NormalizationStats(np.array(n["means"], dtype=float),
                                   np.array(n["stddevs"], dtype=float))
    if tree.get("pca") is not None:
        p = tree["pca"]
        eig = p.get("eigenvalues")
        pca = PcaProjection(np.atleast_2d(np.array(p["basis"], dtype=float)),
                            np.array(p["center"], dtype=float),
                            float(p["explained_fraction"]),
                            None if eig is None else np.array(eig, dtype=float))
    return Preprocessor(stats, pca)


def to_input_space(model: MixtureModel, prep: Preprocessor) -> MixtureModel:
    """Express a model fitted on normalized data in the raw data coordinates.

    Only normalization can be undone; a PCA model has no full-dimensional
    covariance to map back to.
    """
    if prep.pca is not None:
        raise ConfigError("a PCA-projected model cannot be mapped back to input space")
    if prep.stats is None:
        return model
    s, m = prep.stats.stddevs, prep.stats.means
    scale = np.outer(s, s)
    threshold = None if model.threshold is None else model.threshold - float(np.sum(np.log(s)))
    prior = None if model.prior_covariance is None else model.prior_covariance * scale
    return model.replace(means=model.means * s + m, covariances=model.covariances * scale,
                         prior_covariance=prior, threshold=threshold, epsilon=None)


# ---------------------------------------------------------------- model file


@dataclass
class ModelBundle:
    """Everything the online loop needs between invocations."""

    model: MixtureModel
    prep: Preprocessor = field(default_factory=Preprocessor)
    config: dict = field(default_factory=dict)
    outliers: Optional[OutlierStore] = None
    manifest: Optional["BatchManifest"] = None


def model_to_dict(model: MixtureModel, prep: Preprocessor = Preprocessor(),
                  config: Optional[dict] = None) -> dict:
    return {
        "schema": SCHEMA,
        "version": SCHEMA_VERSION,
        "dimension": int(model.dim),
        "threshold": None if model.threshold is None else float(model.threshold),
        "round": int(model.round),
        "epsilon": None if model.epsilon is None else float(model.epsilon),
        "prior": {
            "strength": float(model.prior_strength),
            "covariance": _arr(model.prior_covariance),
        },
        "components": [
            {
                "weight": float(w),
                "mean": _arr(mu),
                "covariance": np.asarray(cov, dtype=float).reshape(-1).tolist(),
                "count": float(n),
            }
            for w, mu, cov, n in zip(model.weights, model.means, model.covariances,
                                     model.counts)
        ],
        "preprocessing": _prep_dict(prep),
        "config": dict(config or {}),
    }


def model_from_dict(tree) -> tuple:
    """Inverse of :func:`model_to_dict`; returns ``(model, prep, config)``."""
    if not isinstance(tree, dict) or tree.get("schema") != SCHEMA:
        raise ParseError("not an incgmm model file")
    if tree.get("version") != SCHEMA_VERSION:
        raise UnsupportedVersionError(
            f"model file version {tree.get('version')!r} is not supported "
            f"(this build reads version {SCHEMA_VERSION})"
        )
    try:
        d = int(tree["dimension"])
        comps = tree["components"]
        if not comps:
            raise ParseError("model file has no components")
        prior = tree["prior"]
        model = MixtureModel(
            weights=np.array([c["weight"] for c in comps], dtype=float),
            means=np.array([c["mean"] for c in comps], dtype=float).reshape(len(comps), d),
            covariances=np.array([c["covariance"] for c in comps],
                                 dtype=float).reshape(len(comps), d, d),
            counts=np.array([c["count"] for c in comps], dtype=float),
            threshold=tree["threshold"],
            round=int(tree["round"]),
            prior_strength=float(prior["strength"]),
            prior_covariance=None if prior["covariance"] is None
            else np.array(prior["covariance"], dtype=float),
            epsilon=tree["epsilon"],
        )
        prep = _prep_from(tree.get("preprocessing") or {})
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed model file: {exc}") from None
    return model, prep, dict(tree.get("config") or {})


def model_json(model, prep=Preprocessor(), config=None) -> str:
    return json.dumps(model_to_dict(model, prep, config), indent=1) + "\n"


def save_model(model: MixtureModel, path, prep: Preprocessor = Preprocessor(),
               config: Optional[dict] = None) -> None:
    atomic_write_text(path, model_json(model, prep, config))


def load_model(path) -> tuple:
    """Read a model file; returns ``(model, prep, config)``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    try:
        tree = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid model file ({exc.msg})", row=exc.lineno,
                         column=exc.colno) from None
    return model_from_dict(tree)


# ---------------------------------------------------------------- outlier sidecar


def outliers_text(store: OutlierStore) -> str:
    d = store.dim
    header = ["round", "index"] + [f"x{j}" for j in range(d)]
    lines = [",".join(header)]
    for (t, i), v in zip(store.origins, store.vectors):
        lines.append(",".join([str(int(t)), str(int(i))] + [format_float(x) for x in v]))
    return "\n".join(lines) + "\n"


def load_outliers(path, d: int) -> OutlierStore:
    header, X = load_csv(path, return_header=True)
    if len(header) != d + 2 or header[:2] != ["round", "index"]:
        raise ShapeError(f"{path}: outlier file does not match dimension {d}")
    return OutlierStore(X[:, 2:].copy(), X[:, :2].astype(int))


# ---------------------------------------------------------------- manifest


@dataclass
class BatchManifest:
    """Ingested batch files in order, with strictly increasing timestamps."""

    entries: list = field(default_factory=list)  # [(path, unix seconds)]

    def append(self, path, timestamp: float) -> "BatchManifest":
        timestamp = float(timestamp)
        if self.entries and timestamp <= self.entries[-1][1]:
            raise DataError(
                f"batch timestamp {timestamp!r} is not after the last ingested batch "
                f"({self.entries[-1][1]!r})"
            )
        return BatchManifest(self.entries + [(str(path), timestamp)])

    def next_timestamp(self, proposed: float) -> float:
        """``proposed`` or, when that would break the ordering, the next representable time."""
        if self.entries and proposed <= self.entries[-1][1]:
            return float(np.nextafter(self.entries[-1][1], np.inf))
        return float(proposed)

    def to_text(self) -> str:
        tree = {"schema": MANIFEST_SCHEMA, "version": SCHEMA_VERSION,
                "batches": [{"path": p, "timestamp": t} for p, t in self.entries]}
        return json.dumps(tree, indent=1) + "\n"

    @classmethod
    def load(cls, path) -> "BatchManifest":
        try:
            tree = json.loads(Path(path).read_text(encoding="utf-8"))
            if tree.get("schema") != MANIFEST_SCHEMA:
                raise ParseError(f"{path}: not a batch manifest")
            if tree.get("version") != SCHEMA_VERSION:
                raise UnsupportedVersionError(f"{path}: manifest version {tree.get('version')!r}")
            out = cls()
            for b in tree["batches"]:
                out = out.append(b["path"], b["timestamp"])
            return out
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid manifest ({exc.msg})") from None
        except (KeyError, TypeError, AttributeError) as exc:
            raise ParseError(f"{path}: malformed manifest: {exc}") from None


# ---------------------------------------------------------------- bundles


def sidecar_paths(path) -> tuple:
    path = str(path)
    return Path(path + OUTLIER_SUFFIX), Path(path + MANIFEST_SUFFIX)


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write the model file and both sidecars; all three appear or none do."""
    out_path, man_path = sidecar_paths(path)
    store = bundle.outliers if bundle.outliers is not None \
        else OutlierStore.empty(bundle.model.dim)
    manifest = bundle.manifest if bundle.manifest is not None else BatchManifest()
    atomic_write_many({
        out_path: outliers_text(store),
        man_path: manifest.to_text(),
        Path(path): model_json(bundle.model, bundle.prep, bundle.config),
    })


def load_bundle(path) -> ModelBundle:
    model, prep, config = load_model(path)
    out_path, man_path = sidecar_paths(path)
    store = load_outliers(out_path, model.dim) if out_path.exists() \
        else OutlierStore.empty(model.dim)
    manifest = BatchManifest.load(man_path) if man_path.exists() else BatchManifest()
    return ModelBundle(model, prep, config, store, manifest)


def write_report(path, tree: dict) -> None:
    atomic_write_text(path, json.dumps(tree, indent=1, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")
