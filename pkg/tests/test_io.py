import json
import os

import numpy as np
import pytest

from incgmm import io as iox
from incgmm.errors import ConfigError, DataError, ParseError, ShapeError, UnsupportedVersionError
from incgmm.evaluation import gen_unbalance
from incgmm.io import (
    BatchManifest,
    ModelBundle,
    Preprocessor,
    load_bundle,
    load_csv,
    load_model,
    save_bundle,
    save_csv,
    save_model,
    to_input_space,
)
from incgmm.offline_gmm import OutlierStore, fit_offline
from incgmm.online_update import online_step
from incgmm.preprocessing import apply_normalization, fit_normalization, fit_pca


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# ------------------------------------------------------------ CSV


def test_small_csv(tmp_path):
    X = load_csv(write(tmp_path / "a.csv", "u,v\n1,2\n3.5,-4e-3\n"))
    assert X.shape == (2, 2) and X.tolist() == [[1.0, 2.0], [3.5, -0.004]]


def test_header_returned_in_order(tmp_path):
    header, X = load_csv(write(tmp_path / "a.csv", "b,a\n1,2\n"), return_header=True)
    assert header == ["b", "a"] and X.tolist() == [[1.0, 2.0]]


def test_nan_cell_reports_location(tmp_path):
    with pytest.raises(ParseError) as exc:
        load_csv(write(tmp_path / "a.csv", "u,v\n1,2\n3,NaN\n"))
    assert exc.value.row == 3 and exc.value.column == "v"


def test_text_cell_reports_location(tmp_path):
    with pytest.raises(ParseError) as exc:
        load_csv(write(tmp_path / "a.csv", "u,v\nabc,2\n"))
    assert exc.value.row == 2 and exc.value.column == "u"


def test_ragged_row_is_shape_error(tmp_path):
    with pytest.raises(ShapeError):
        load_csv(write(tmp_path / "a.csv", "u,v\n1,2\n3\n"))


def test_missing_file_and_header(tmp_path):
    with pytest.raises(DataError):
        load_csv(tmp_path / "none.csv")
    with pytest.raises(ParseError):
        load_csv(write(tmp_path / "e.csv", ""))


def test_unbalance_export_round_trips_bit_exactly(tmp_path):
    X = gen_unbalance(0).points
    assert X.shape[0] == 6500
    save_csv(tmp_path / "u.csv", X)
    Y = load_csv(tmp_path / "u.csv")
    assert Y.tobytes() == X.tobytes()
    save_csv(tmp_path / "v.csv", Y)
    assert (tmp_path / "u.csv").read_bytes() == (tmp_path / "v.csv").read_bytes()


def test_awkward_floats_round_trip(tmp_path):
    X = np.array([[0.1, 1 / 3, 5e-324], [-1.7976931348623157e308, 2.0**-1022, 1e16 + 2]])
    save_csv(tmp_path / "w.csv", X)
    assert load_csv(tmp_path / "w.csv").tobytes() == X.tobytes()


# ------------------------------------------------------------ model files


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(21)
    raw = np.vstack([rng.normal(size=(200, 3)) * [1, 2, 3] + [10, 0, -5],
                     rng.normal(size=(200, 3)) * [2, 1, 1] + [-10, 4, 5]])
    stats = fit_normalization(raw)
    off = fit_offline(apply_normalization(raw, stats), 0.01, k=2, seed=0)
    return raw, stats, off


def assert_same_model(a, b):
    for name in ("weights", "means", "covariances", "counts", "prior_covariance"):
        assert np.asarray(getattr(a, name)).tobytes() == np.asarray(getattr(b, name)).tobytes()
    for name in ("threshold", "round", "prior_strength", "epsilon"):
        assert getattr(a, name) == getattr(b, name)


def test_model_round_trip_is_exact(tmp_path, fitted):
    _, stats, off = fitted
    config = {"alpha": 0.01, "seed": 0}
    save_model(off.model, tmp_path / "m.json", Preprocessor(stats), config)
    model, prep, cfg = load_model(tmp_path / "m.json")
    assert_same_model(model, off.model)
    assert prep.same_as(Preprocessor(stats)) and cfg == config


def test_pca_preprocessing_round_trips(tmp_path, fitted):
    raw, stats, off = fitted
    pca = fit_pca(apply_normalization(raw, stats), 0.9)
    p = Preprocessor(stats, pca)
    save_model(off.model, tmp_path / "m.json", p)
    _, prep, _ = load_model(tmp_path / "m.json")
    assert prep.same_as(p)
    np.testing.assert_array_equal(prep(raw), p(raw))


def test_truncated_file_is_parse_error(tmp_path, fitted):
    _, _, off = fitted
    save_model(off.model, tmp_path / "m.json")
    text = (tmp_path / "m.json").read_text()
    write(tmp_path / "t.json", text[: len(text) // 2])
    with pytest.raises(ParseError):
        load_model(tmp_path / "t.json")


def test_version_mismatch(tmp_path, fitted):
    _, _, off = fitted
    tree = iox.model_to_dict(off.model)
    tree["version"] = 99
    write(tmp_path / "v.json", json.dumps(tree))
    with pytest.raises(UnsupportedVersionError):
        load_model(tmp_path / "v.json")


def test_foreign_json_rejected(tmp_path):
    with pytest.raises(ParseError):
        load_model(write(tmp_path / "x.json", '{"a": 1}'))


def test_model_size_independent_of_rounds(tmp_path, fitted):
    raw, stats, off = fitted
    rng = np.random.default_rng(0)
    model, store = off.model, off.outliers
    sizes = {}
    for t in range(1, 11):
        batch = raw[rng.choice(len(raw), 60)] + rng.normal(scale=0.05, size=(60, 3))
        res = online_step(model, store, apply_normalization(batch, stats))
        model, store = res.model_after, res.outliers_after
        if t in (1, 10):
            save_model(model, tmp_path / f"m{t}.json", Preprocessor(stats))
            sizes[t] = os.path.getsize(tmp_path / f"m{t}.json")
    assert model.n_components == 2
    # only float formatting (shortest repr) can change the byte count
    assert abs(sizes[10] - sizes[1]) <= 0.05 * sizes[1]


def test_input_space_conversion(fitted):
    raw, stats, off = fitted
    prep = Preprocessor(stats)
    back = to_input_space(off.model, prep)
    z = apply_normalization(raw[:5], stats)
    # densities differ by the Jacobian of the normalization, and so does the threshold
    np.testing.assert_allclose(back.log_likelihood(raw[:5]) - off.model.log_likelihood(z),
                               -np.sum(np.log(stats.stddevs)), atol=1e-9)
    assert back.threshold - off.model.threshold == pytest.approx(-np.sum(np.log(stats.stddevs)))
    with pytest.raises(ConfigError):
        to_input_space(off.model, Preprocessor(stats, fit_pca(z, 0.9)))


# ------------------------------------------------------------ bundles and manifest


def test_bundle_round_trip(tmp_path, fitted):
    _, stats, off = fitted
    manifest = BatchManifest().append("b1.csv", 10.0).append("b2.csv", 11.5)
    bundle = ModelBundle(off.model, Preprocessor(stats), {"alpha": 0.01}, off.outliers, manifest)
    save_bundle(bundle, tmp_path / "m.json")
    back = load_bundle(tmp_path / "m.json")
    assert_same_model(back.model, off.model)
    assert back.outliers.vectors.tobytes() == off.outliers.vectors.tobytes()
    assert np.array_equal(back.outliers.origins, off.outliers.origins)
    assert back.manifest.entries == manifest.entries


def test_bundle_without_sidecars(tmp_path, fitted):
    _, _, off = fitted
    save_model(off.model, tmp_path / "m.json")
    back = load_bundle(tmp_path / "m.json")
    assert len(back.outliers) == 0 and back.manifest.entries == []


def test_manifest_ordering():
    m = BatchManifest().append("a", 5.0)
    with pytest.raises(DataError):
        m.append("b", 5.0)
    assert m.next_timestamp(3.0) > 5.0 and m.next_timestamp(7.0) == 7.0
    assert m.append("b", m.next_timestamp(5.0)).entries[-1][0] == "b"


def test_manifest_load_rejects_disorder(tmp_path):
    text = json.dumps({"schema": iox.MANIFEST_SCHEMA, "version": iox.SCHEMA_VERSION,
                       "batches": [{"path": "a", "timestamp": 2.0},
                                   {"path": "b", "timestamp": 1.0}]})
    with pytest.raises(DataError):
        BatchManifest.load(write(tmp_path / "m.json", text))


def test_failed_bundle_write_leaves_old_files(tmp_path, fitted, monkeypatch):
    _, _, off = fitted
    path = tmp_path / "m.json"
    save_bundle(ModelBundle(off.model, outliers=off.outliers), path)
    before = {p: p.read_bytes() for p in tmp_path.iterdir()}
    calls = {"n": 0}
    real = iox._write_temp

    def flaky(p, text):
        calls["n"] += 1
        if calls["n"] == 3:
            raise OSError("disk full")
        return real(p, text)

    monkeypatch.setattr(iox, "_write_temp", flaky)
    changed = off.model.replace(round=7)
    with pytest.raises(OSError):
        save_bundle(ModelBundle(changed, outliers=OutlierStore.empty(off.model.dim)), path)
    after = {p: p.read_bytes() for p in tmp_path.iterdir()}
    assert after == before
