import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpfuse.fingerprinting import (
    NoCandidatesError,
    Region,
    likelihood,
    log_likelihood,
    match,
    match_magnetic_constrained,
    match_profile,
)
from fpfuse.mapping import FeatureStats, Fingerprint, FingerprintDatabase, MagneticProfile


def _fp(mean, var=1.0, name="a", loc=(0.5, 0.5), index=(0, 0)):
    feats = {f"{name}{j}": FeatureStats(m, var, 30) for j, m in enumerate(np.atleast_1d(mean))}
    return Fingerprint(index, loc, 1.0, feats, 30)


def test_gaussian_peak():
    assert likelihood({"a0": -60.0}, _fp(-60.0)) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-12)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 3.0])
def test_one_sigma_point(sigma):
    val = likelihood({"a0": -60.0 + sigma}, _fp(-60.0, sigma**2))
    assert val == pytest.approx(0.24197072451914337 / sigma, rel=1e-12)


def test_no_shared_feature_is_zero():
    assert likelihood({"zz": -50.0}, _fp(-60.0)) == 0.0


def test_log_and_direct_product_rank_alike():
    rng = np.random.default_rng(0)
    for _ in range(50):
        fps = [_fp(rng.normal(-60, 5, 4), rng.uniform(1, 9)) for _ in range(6)]
        q = {f"a{j}": float(v) for j, v in enumerate(rng.normal(-60, 5, 4))}
        direct = [math.prod(math.exp(-0.5 * (q[n] - s.mean) ** 2 / s.var) / math.sqrt(2 * math.pi * s.var)
                            for n, s in fp.features.items()) for fp in fps]
        logs = [log_likelihood(q, fp, floor=-1e9)[0] for fp in fps]
        assert np.array_equal(np.argsort(direct), np.argsort(logs))


def _grid_db(means, cell=1.0, modality="wifi", var=1.0):
    """One fingerprint per entry of ``means`` along the x axis."""
    db = FingerprintDatabase(modality, (0.0, 0.0), cell)
    for i, m in enumerate(means):
        fp = _fp(m, var, loc=((i + 0.5) * cell, 0.5 * cell), index=(i, 0))
        db.cells[(i, 0)] = fp
    return db


def test_identity_query_returns_rp():
    db = _grid_db([[-40, -60, -80], [-60, -40, -60], [-80, -60, -40]])
    res = match({"a0": -60.0, "a1": -40.0, "a2": -60.0}, db, kappa=1)
    assert np.allclose(res.position, [1.5, 0.5])


def test_symmetric_pair_averages():
    db = _grid_db([[-50, -50, -50], [-50, -50, -50]], cell=2.0)
    db.cells[(0, 0)].rp_location = (0.0, 0.0)
    db.cells[(1, 0)].rp_location = (2.0, 0.0)
    db.refresh()
    res = match({"a0": -50.0, "a1": -50.0, "a2": -50.0}, db, kappa=2)
    assert np.allclose(res.position, [1.0, 0.0])


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.floats(0.1, 100.0))
def test_kappa_one_is_argmax_and_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    db = _grid_db(rng.normal(-60, 8, (8, 4)).tolist(), var=4.0)
    q = {f"a{j}": float(v) for j, v in enumerate(rng.normal(-60, 8, 4))}
    res = match(q, db, kappa=1)
    lls = [log_likelihood(q, db.cells[k])[0] for k in db.keys]
    assert np.allclose(res.position, db.cells[db.keys[int(np.argmax(lls))]].rp_location)
    # positive rescaling of every weight (a shift of every log-likelihood) changes nothing
    res3 = match(q, db, kappa=3)
    w = res3.weights * scale
    pos = (w[:, None] * db.arrays["rp"][res3.rows]).sum(0) / w.sum()
    assert np.allclose(pos, res3.position, atol=1e-12)


def test_min_shared_and_region():
    db = _grid_db([[-40, -60, -80], [-60, -40, -60]])
    with pytest.raises(NoCandidatesError):
        match({"a0": -40.0, "a1": -60.0}, db)  # only two shared APs
    res = match({"a0": -40.0, "a1": -60.0, "a2": -80.0}, db, region=Region((1.5, 0.5), 0.5), kappa=5)
    assert res.cells == [(1, 0)]
    with pytest.raises(ValueError):
        match({}, db, kappa=0)


def test_identity_on_synthetic_radio_map(small_world):
    from fpfuse.mapping import MapSample, build_database

    rng = np.random.default_rng(8)
    pts = rng.uniform(0, [40, 24], (6000, 2))
    rss = small_world.rss(pts, rng)
    samples = [MapSample(tuple(p), 1.0, {ap: float(v) for ap, v in zip(small_world.ap_ids, r) if np.isfinite(v)})
               for p, r in zip(pts, rss)]
    db = build_database(samples, "wifi")
    rp = db.arrays["rp"]
    err = []
    for k, fp in zip(db.keys, (db.cells[k] for k in db.keys)):
        q = {ap: st.mean for ap, st in fp.features.items()}
        err.append(np.linalg.norm(match(q, db).position - fp.rp_location))
    assert len(rp) > 50
    assert np.median(err) <= db.cell_length / 2


def _mag_db():
    """Magnetic strip whose second half repeats the first half's gradient pattern."""
    base = [0.20, 0.23, 0.21, 0.26, 0.22, 0.27, 0.24, 0.21, 0.25, 0.20]
    db = FingerprintDatabase("magnetic", (0.0, 0.0), 1.0)
    for i, h in enumerate(base + base):
        v = 0.5 + 0.3 * (h - 0.2)
        db.cells[(i, 0)] = Fingerprint((i, 0), (i + 0.5, 0.5), 0.5,
                                       {"h": FeatureStats(h, 1e-4, 30), "v": FeatureStats(v, 1e-4, 30)}, 30)
    return db, base


def _profile(values, x_last, twin_shift=0.0):
    h = np.asarray(values) + twin_shift
    v = 0.5 + 0.3 * (np.asarray(values) - 0.2)
    offsets = np.column_stack([np.arange(-len(h) + 1, 1, dtype=float), np.zeros(len(h))])
    return MagneticProfile(h - h[0], v - v[0], offsets)


def test_constrained_match_rejects_twin():
    db, base = _mag_db()
    vals = np.array(base[2:7])
    vals[1] += 0.004  # slightly off at the true location, exact at the twin
    db.cells[(13, 0)].features["h"] = FeatureStats(vals[1], 1e-4, 30)
    db.refresh()
    prof = _profile(vals, 6)
    free = match_profile(prof, db, kappa=1)
    assert np.allclose(free.position, [16.5, 0.5])
    res = match_magnetic_constrained(prof, db, wifi_pos=(6.0, 0.5), wifi_accuracy=2.0, kappa=1)
    assert np.allclose(res.position, [6.5, 0.5])
    assert res.region.radius == 6.0 and not res.fallback


def test_constrained_whole_map_equals_free_match():
    db, base = _mag_db()
    prof = _profile(base[2:7], 6)
    a = match_profile(prof, db, kappa=3)
    b = match_magnetic_constrained(prof, db, wifi_pos=(10.0, 0.5), wifi_accuracy=100.0, kappa=3)
    assert np.array_equal(a.rows, b.rows) and np.allclose(a.position, b.position)


def test_constrained_falls_back_when_circle_empty():
    db, base = _mag_db()
    res = match_magnetic_constrained(_profile(base[2:7], 6), db, wifi_pos=(200.0, 200.0), wifi_accuracy=1.0)
    assert res.fallback
    with pytest.raises(ValueError):
        match_magnetic_constrained(_profile(base[2:7], 6), db, (0, 0), 0.0)
