import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpfuse.fai import (
    SENTINEL,
    FaiConfig,
    FaiValue,
    dop,
    dsf_table,
    fai_mc,
    fai_mcm,
    fai_sd_mag,
    fai_sd_wifi,
    fai_ss_mag,
    fai_ss_wifi,
    fai_wd,
    inject_rp_uncertainty,
    train_mc,
)
from fpfuse.fingerprinting import MatchResult
from fpfuse.mapping import ApEstimate, FeatureStats, Fingerprint, FingerprintDatabase, MagneticProfile

pos = st.floats(0.01, 1e3)


def _ap(x=0.0, y=0.0, b1=2.0, b2=-40.0):
    return ApEstimate("a", x, y, b1, b2, np.eye(4))


def test_ss_wifi_one_metre():
    v = fai_ss_wifi({"a": -40.0}, {"a": _ap()})
    assert v.value == pytest.approx(0.2, abs=1e-12) and not v.degenerate


def test_ss_wifi_ten_metres():
    assert _ap().distance(-60.0) == pytest.approx(10.0, rel=1e-12)
    assert fai_ss_wifi({"a": -60.0}, {"a": _ap()}).value == pytest.approx(2.0)


def test_ss_wifi_without_known_aps_is_sentinel():
    v = fai_ss_wifi({"x": -50.0}, {"a": _ap()})
    assert v.degenerate and v.value == SENTINEL


def test_ss_magnetic_locked_value():
    # all gradient features 0.02 Gauss = 20 mG, alpha 50 -> 50 / 20
    prof = MagneticProfile(np.array([0.0, 0.02, 0.02]), np.array([0.0, 0.02, -0.02]))
    assert fai_ss_mag(prof).value == pytest.approx(2.5, abs=1e-12)
    assert fai_ss_mag(MagneticProfile(np.zeros(4), np.zeros(4))).degenerate


def test_symmetric_four_ap_dop():
    aps = np.array([[0, 10], [0, -10], [10, 0], [-10, 0]], dtype=float)
    assert dop((np.zeros(2)[None] - aps) / 10.0) == pytest.approx(1.0, abs=1e-9)
    assert fai_sd_wifi((0, 0), aps).value == pytest.approx(5.0, abs=1e-9)


def test_orthogonal_magnetic_directions():
    prof = MagneticProfile(np.array([0.0, 0.01, 0.0]), np.array([0.0, 0.0, 0.03]))
    assert fai_sd_mag(prof).value == pytest.approx(math.sqrt(2.0), abs=1e-12)


def test_collinear_aps_give_sentinel():
    v = fai_sd_wifi((0, 0), [[5, 0], [10, 0], [20, 0]])
    assert v.degenerate and v.value == SENTINEL
    assert fai_sd_wifi((0, 0), [[5, 0]]).degenerate


@settings(max_examples=60)
@given(st.integers(0, 10_000), st.integers(3, 8))
def test_sd_matches_brute_force_dop(seed, n):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 40, 2)
    aps = rng.uniform(0, 40, (n, 2))
    u = (p - aps) / np.linalg.norm(p - aps, axis=1)[:, None]
    a = sum(x * x for x, _ in u)
    b = sum(x * y for x, y in u)
    c = sum(y * y for _, y in u)
    brute = 5.0 * math.sqrt((a + c) / (a * c - b * b))
    v = fai_sd_wifi(p, aps)
    if brute < SENTINEL:
        assert abs(v.value - brute) < 1e-9 * max(1.0, brute)


def _db(rows):
    """Fingerprints given as (location, [means]) with unit variance."""
    db = FingerprintDatabase("wifi", (0.0, 0.0), 1.0)
    for i, (loc, means) in enumerate(rows):
        feats = {f"a{j}": FeatureStats(m, 1.0, 30) for j, m in enumerate(means)}
        db.cells[(i, 0)] = Fingerprint((i, 0), loc, 1.0, feats, 30)
    return db


def test_dsf_mean_of_equally_similar_neighbours():
    db = _db([((0, 0), [-60, -60, -60]), ((3, 0), [-62, -60, -60]), ((0, 5), [-58, -60, -60]),
              ((40, 40), [-90, -30, -90])])
    assert dsf_table(db, kappa_d=2)[0] == pytest.approx(4.0)


def test_dsf_planted_twin():
    db = _db([((0, 0), [-50, -60, -70]), ((30, 0), [-50, -60, -70]), ((10, 10), [-80, -40, -60]),
              ((20, 20), [-40, -80, -50])])
    assert dsf_table(db, kappa_d=1)[0] == pytest.approx(30.0)


def test_dsf_unique_vs_aliased():
    # a smooth gradient map on a 3 m grid plus one cell that repeats a far-away fingerprint
    rows = []
    for i in range(8):
        for j in range(8):
            x, y = 3 * i + 1.5, 3 * j + 1.5
            rows.append(((x, y), [-40 - 1.5 * x, -40 - 1.5 * y, -40 - 0.75 * (x + y)]))
    rows.append(((70.0, 70.0), rows[0][1]))
    db = _db(rows)
    table = dsf_table(db, kappa_d=2)
    unique = table[27]
    assert 3.0 <= unique <= 4.5
    assert table[0] > unique


def test_dsf_needs_enough_fingerprints():
    with pytest.raises(ValueError):
        dsf_table(_db([((0, 0), [-50, -50, -50])] * 3), kappa_d=5)


def _match(weights, rows=None):
    w = np.asarray(weights, dtype=float)
    rows = np.arange(len(w)) if rows is None else np.asarray(rows)
    return MatchResult(np.zeros(2), rows, np.log(w), w, "wifi")


def test_wd_examples():
    assert fai_wd(_match([1, 1]), [2, 4]).value == pytest.approx(3.0)
    assert fai_wd(_match([3, 1]), [2, 6]).value == pytest.approx(3.0)
    assert fai_wd(_match([1.0]), [7.5]).value == 7.5


@given(st.lists(pos, min_size=1, max_size=8), st.floats(1e-3, 1e3))
def test_wd_scale_invariant(ws, scale):
    d = np.linspace(1, 10, len(ws))
    a = fai_wd(_match(ws), d).value
    b = fai_wd(_match(np.array(ws) * scale), d).value
    assert a == pytest.approx(b, rel=1e-9)


def test_injection():
    v = inject_rp_uncertainty(FaiValue(3.0, "wd", "wifi"), 4.0)
    assert v.value == pytest.approx(5.0, abs=1e-9)
    assert inject_rp_uncertainty(FaiValue(3.0, "wd", "wifi"), 0.0).value == 3.0
    with pytest.raises(ValueError):
        inject_rp_uncertainty(FaiValue(3.0, "wd", "wifi"), -1.0)


def test_combinations():
    assert fai_mcm(3, 5, 4).value == 5
    assert fai_mc(2, 2, 2, rho=(0.2, 0.3, 0.5)).value == pytest.approx(2.0, abs=1e-9)
    assert fai_mc(1, 2, 3, rho=(0.2, 0.3, 0.5)).value == pytest.approx(2.3, abs=1e-9)


@given(pos, pos, pos)
def test_mcm_dominates(a, b, c):
    m = fai_mcm(a, b, c).value
    assert m >= a and m >= b and m >= c


def test_fai_value_must_be_positive():
    with pytest.raises(ValueError):
        FaiValue(0.0, "ss", "wifi")
    with pytest.raises(ValueError):
        FaiConfig(kappa_d=0)


def test_train_mc_exact_fit():
    rng = np.random.default_rng(0)
    ss, sd, wd = rng.uniform(1, 10, (3, 200))
    rho = train_mc(ss, sd, wd, 0.2 * ss + 0.3 * sd + 0.5 * wd)
    assert np.allclose(rho, (0.2, 0.3, 0.5), atol=1e-9)


def test_train_mc_uncorrelated_noise():
    # zero-mean regressors make an intercept-free fit of unrelated noise land near zero
    rng = np.random.default_rng(1)
    X = rng.normal(0, 1, (3, 1000))
    rho = train_mc(*X, rng.normal(0, 1, 1000))
    assert max(abs(r) for r in rho) < 0.1


def test_train_mc_guards():
    with pytest.raises(ValueError):
        train_mc([1] * 5, [1] * 5, [1] * 5, [1] * 5)
    with pytest.raises(np.linalg.LinAlgError):
        train_mc([1.0] * 40, [2.0] * 40, [3.0] * 40, np.arange(40.0))
