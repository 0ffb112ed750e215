import json

import numpy as np
import pytest

from fpfuse.dead_reckoning import dcm_from_euler
from fpfuse.mapping import (
    FingerprintDatabase,
    GeometryError,
    MapSample,
    RssObservation,
    build_database,
    estimate_ap,
    extract_magnetic_profile,
    fit_aps,
    leveled_components,
    path_loss_rss,
)


def test_constant_field_profile_is_zero():
    p = extract_magnetic_profile(np.tile([0.16, 0.0, 0.52], (10, 1)), np.tile(np.eye(3), (10, 1, 1)))
    assert np.array_equal(p.h, np.zeros(10)) and np.array_equal(p.v, np.zeros(10))


def test_vertical_ramp_profile():
    m = np.column_stack([np.full(4, 0.16), np.zeros(4), [0.50, 0.51, 0.52, 0.53]])
    p = extract_magnetic_profile(m, np.tile(np.eye(3), (4, 1, 1)), window=4)
    assert np.allclose(p.v, [0.0, 0.01, 0.02, 0.03], atol=1e-12)
    assert len(p.features()) == 6


def test_profile_needs_full_window():
    with pytest.raises(ValueError):
        extract_magnetic_profile(np.zeros((3, 3)), np.tile(np.eye(3), (3, 1, 1)), window=4)


def test_tilt_and_heading_invariance():
    m_n = np.array([[0.16, 0.02, 0.52], [0.18, -0.01, 0.49], [0.15, 0.0, 0.55]])
    level = leveled_components(m_n, np.tile(np.eye(3), (3, 1, 1)))
    C = np.stack([dcm_from_euler(0.3, -0.2, 1.1), dcm_from_euler(-0.1, 0.25, -2.0), dcm_from_euler(0.0, 0.4, 0.3)])
    m_b = np.einsum("kji,kj->ki", C, m_n)
    tilted = leveled_components(m_b, C)
    for a, b in zip(level, tilted):
        assert np.allclose(a, b, atol=1e-6)


def _samples(p, values, name="ap0", sigma=1.0):
    return [MapSample(p, sigma, {name: v}) for v in values]


def test_sparse_cell_dropped():
    db = build_database(_samples((1.0, 1.0), [-60.0] * 4), "wifi", lambda_n1=5)
    assert len(db) == 0


def test_few_samples_get_default_variance():
    db = build_database(_samples((1.0, 1.0), [-60.0] * 10), "wifi", lambda_n2=20)
    st = db.cells[(0, 0)].features["ap0"]
    assert st.mean == -60.0 and st.var == 25.0 and st.count == 10


def test_population_variance_when_dense():
    db = build_database(_samples((1.0, 1.0), [-58.0, -62.0] * 15), "wifi")
    st = db.cells[(0, 0)].features["ap0"]
    assert st.mean == pytest.approx(-60.0) and st.var == pytest.approx(4.0)


def test_rp_location_and_sigma():
    s = _samples((4.0, 7.0), [-60.0] * 3, sigma=1.0) + _samples((5.0, 8.0), [-60.0] * 3, sigma=3.0)
    db = build_database(s, "wifi")
    fp = db.cells[(1, 2)]
    assert fp.rp_location == (4.5, 7.5)
    assert fp.rp_sigma == pytest.approx(np.sqrt(5.0))


def test_build_database_argument_checks():
    with pytest.raises(ValueError):
        build_database([], "wifi", cell_length=0)
    with pytest.raises(ValueError):
        build_database([], "wifi", lambda_n1=30, lambda_n2=20)
    with pytest.raises(ValueError):
        build_database([], "sonar")


def test_grid_translation_consistency():
    db = FingerprintDatabase("wifi", (0.0, 0.0), 3.0)
    pts = np.random.default_rng(0).uniform(-20, 20, (200, 2))
    assert np.array_equal(db.cell_index(pts + 3.0), db.cell_index(pts) + 1)


def test_rss_observation_range():
    with pytest.raises(ValueError):
        RssObservation(0.0, {"a": 5.0})
    assert RssObservation(0.0, {"a": -96.0, "b": -50.0}).usable() == {"b": -50.0}


def test_path_loss_at_one_metre():
    assert path_loss_rss(1.0, 2.0, -40.0) == -40.0


def test_estimate_ap_noiseless():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 40, (50, 2))
    ap = np.array([17.0, 23.0])
    r = path_loss_rss(np.linalg.norm(pts - ap, axis=1), 2.0, -40.0)
    est = estimate_ap(pts, r)
    assert np.linalg.norm(est.position - ap) < 1e-3
    assert abs(est.beta1 - 2.0) < 1e-3 and abs(est.beta2 + 40.0) < 1e-3
    assert est.rms_residual < 1e-3
    assert np.allclose(est.covariance, est.covariance.T)


def test_estimate_ap_monotone_cost():
    # the fitted residual must not exceed the residual at the starting point
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 40, (60, 2))
    r = path_loss_rss(np.linalg.norm(pts - [30, 5], axis=1), 2.5, -42.0) + rng.normal(0, 2, 60)
    est = estimate_ap(pts, r)
    w = 10 ** ((r - r.max()) / 10)
    x0 = w @ pts / w.sum()
    c0 = np.sum((r - path_loss_rss(np.linalg.norm(pts - x0, axis=1), 2.0, r.max())) ** 2)
    c1 = np.sum((r - path_loss_rss(np.linalg.norm(pts - est.position, axis=1), est.beta1, est.beta2)) ** 2)
    assert c1 <= c0


def test_estimate_ap_rejects_bad_geometry():
    line = np.column_stack([np.linspace(0, 30, 20), np.zeros(20)])
    with pytest.raises(GeometryError):
        estimate_ap(line, np.full(20, -60.0))
    with pytest.raises(GeometryError):
        estimate_ap(np.ones((5, 2)), np.full(5, -60.0))
    with pytest.raises(ValueError):
        estimate_ap(np.zeros((10, 2)), np.zeros(9))


def test_fit_aps_skips_thin_aps():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 30, (40, 2))
    samples = [MapSample(tuple(p), 1.0, {"a": float(path_loss_rss(np.linalg.norm(p - [10, 10]), 2.0, -40.0))})
               for p in pts]
    samples += [MapSample((1.0, 1.0), 1.0, {"b": -70.0})] * 3
    aps = fit_aps(samples)
    assert list(aps) == ["a"]
    assert np.linalg.norm(aps["a"].position - [10, 10]) < 1e-2


def _example_db():
    s = _samples((1.0, 1.0), [-58.0, -62.0] * 15) + _samples((4.2, 1.3), [-70.0] * 6, name="ap1")
    db = build_database(s, "wifi")
    db.aps = fit_aps([MapSample((float(x), float(y)), 1.0,
                                {"ap0": float(path_loss_rss(np.hypot(x - 5, y - 5), 2.0, -40.0))})
                      for x, y in np.random.default_rng(4).uniform(0, 20, (30, 2))])
    return db


def test_database_round_trip_is_byte_exact(tmp_path):
    db = _example_db()
    path = tmp_path / "db.json"
    db.save(path, manifest="manifest.json abc")
    text = path.read_text()
    back = FingerprintDatabase.load(path)
    assert back.dumps() == text
    assert back.cells == db.cells
    assert json.loads(text)["manifest"] == "manifest.json abc"
    assert np.array_equal(back.aps["ap0"].covariance, db.aps["ap0"].covariance)


def test_load_rejects_foreign_document():
    with pytest.raises(ValueError):
        FingerprintDatabase.from_dict({"format": "something-else"})


def test_row_lookup():
    db = _example_db()
    rows = db.row_at([[1.0, 1.0], [4.0, 2.0], [100.0, 100.0]])
    assert rows[2] == -1
    assert [db.keys[r] for r in rows[:2]] == [(0, 0), (1, 0)]
