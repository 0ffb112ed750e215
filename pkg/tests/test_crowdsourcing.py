import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fpfuse.crowdsourcing import (
    Anchor,
    SegmentCandidate,
    Track,
    dead_reckon_segment,
    select_segments,
    smooth,
    smooth_weighted,
)

pos_sigma = st.floats(0.01, 100.0)


def test_equal_weights_give_sqrt2_reduction():
    x, s = smooth_weighted(0.0, 2.0, 2.0, 2.0, 0.5)
    assert x == pytest.approx(1.0, abs=1e-12)
    assert s == pytest.approx(math.sqrt(2.0), abs=1e-12)


def test_xi_one_returns_forward():
    x, s = smooth_weighted(3.0, 1.5, -7.0, 4.0, 1.0)
    assert x == 3.0 and s == 1.5
    with pytest.raises(ValueError):
        smooth_weighted(0, 1, 0, 1, 1.5)


def test_smooth_track_weights():
    t = np.arange(5.0)
    fwd = Track(t, np.zeros((5, 2)), np.array([0.0, 1.0, 1.0, 2.0, 3.0]))
    bwd = Track(t, np.ones((5, 2)), np.array([3.0, 1.0, 2.0, 1.0, 0.0]))
    sm = smooth(fwd, bwd)
    assert np.allclose(sm.xi[:, 0], [1.0, 0.5, 0.8, 0.2, 0.0])
    assert np.allclose(sm.p_sm[[0, 4], 0], [0.0, 1.0])
    assert sm.sigma_sm[0] == 0.0 and sm.sigma_sm[4] == 0.0
    assert sm.sigma_sm[1] == pytest.approx(math.sqrt(0.5))


def test_smooth_drops_unpaired_epochs():
    fwd = Track([0.0, 1.0, 2.0], np.zeros((3, 2)), 1.0)
    bwd = Track([0.0, 2.02], np.zeros((2, 2)), 1.0)
    sm = smooth(fwd, bwd)
    assert np.array_equal(sm.t, [0.0, 2.0])


@given(pos_sigma, pos_sigma)
def test_inverse_variance_weight_is_optimal(s1, s2):
    xi_star = s2**2 / (s1**2 + s2**2)
    _, best = smooth_weighted(0, s1, 0, s2, xi_star)
    assert best <= min(s1, s2) * (1 + 1e-12)
    for xi in (0.0, 0.25, 0.5, 0.75, 1.0):
        _, s = smooth_weighted(0, s1, 0, s2, xi)
        assert best <= s * (1 + 1e-12)


def test_smoother_monte_carlo_matches_prediction():
    rng = np.random.default_rng(5)
    s1, s2, n = 2.0, 3.0, 1000
    xi = s2**2 / (s1**2 + s2**2)
    xf = rng.normal(0, s1, n)
    xb = rng.normal(0, s2, n)
    x, pred = smooth_weighted(xf, s1, xb, s2, xi)
    assert math.sqrt(np.mean(x**2)) == pytest.approx(float(pred), rel=0.1)


def _cand(ef, eb):
    a0, a1 = Anchor(0.0, (0.0, 0.0), 1.0), Anchor(10.0, (50.0, 0.0), 1.0)
    return SegmentCandidate("c", a0, a1, forward_end=np.array([50.0 + ef, 0.0]), backward_end=np.array([0.0, eb]))


def test_selection_threshold():
    kept = select_segments([_cand(5, 5), _cand(25, 5), _cand(5, 25), _cand(20, 20)], 20.0)
    assert [c.end_errors() for c in kept] == [(5, 5), (20, 20)]
    assert select_segments([SegmentCandidate("x", None, None)]) == []
    with pytest.raises(ValueError):
        select_segments([], 0.0)


def test_dead_reckon_segment_requires_anchors(walk_60s):
    trace, _ = walk_60s
    cand = dead_reckon_segment("w", trace.imu, [])
    assert cand.forward is None and cand.end_errors() == (math.inf, math.inf)


def test_dead_reckon_segment_closes_noise_free(walk_60s):
    trace, _ = walk_60s
    cand = dead_reckon_segment("w", trace.imu, trace.anchors)
    ef, eb = cand.end_errors()
    assert ef < 1.0 and eb < 1.0


def test_smoothed_end_error_not_worse_than_dr(small_world):
    from fpfuse.crowdsourcing import smooth_segment
    from fpfuse.simulation import PathSpec, TraceConfig, synthesize_trace

    spec = PathSpec(np.array([[4.0, 4.0], [34.0, 4.0], [34.0, 20.0]]))
    for seed in range(3):
        tr, gt = synthesize_trace(small_world, spec, cfg=TraceConfig(anchors=True), seed=seed)
        cand = dead_reckon_segment("s", tr.imu, tr.anchors)
        if not select_segments([cand]):
            continue
        sm = smooth_segment(cand)
        ef, eb = cand.end_errors()
        for k, anchor in ((0, cand.start), (-1, cand.end)):
            e_sm = np.linalg.norm(sm.p_sm[k] - np.asarray(anchor.p))
            assert e_sm <= max(ef, eb) + 1e-9
