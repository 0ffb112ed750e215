"""Acceptance criteria, each at its stated tolerance.

Every test appends one PASS/FAIL line to the terminal summary (and prints it),
then asserts.
"""

import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, SMALL_CONFIG, run_cli_pipeline, tree_digest
from scipy.stats import chi2

from fpfuse.benchmark import median_improvement, pooled_correlations
from fpfuse.core import skew
from fpfuse.crowdsourcing import Track, smooth, smooth_weighted
from fpfuse.dead_reckoning import DEG, DrConfig, DrEngine, ImuNoiseModel, NavState, run_dead_reckoning
from fpfuse.fai import dop, fai_mc, fai_mcm, inject_rp_uncertainty, FaiValue
from fpfuse.fingerprinting import likelihood, match
from fpfuse.mapping import FeatureStats, Fingerprint, MapSample, build_database, estimate_ap, path_loss_rss
from fpfuse.simulation import PathSpec, synthesize_trace


def report(n, title, checks, elapsed=None, limit=None):
    """Record one line for criterion ``n``; ``checks`` maps a description to a bool."""
    if limit is not None:
        checks = {**checks, f"runtime {elapsed:.1f}s < {limit:g}s": elapsed < limit}
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    detail = "; ".join(checks) if ok else "failed: " + "; ".join(failed)
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}  {title}  [{detail}]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_formula_checks():
    t0 = time.perf_counter()
    tol = 1e-9
    rng = np.random.default_rng(0)
    v = rng.normal(size=(20, 3))
    anti = all(np.abs(skew(a).T + skew(a)).max() <= tol for a in v)
    _, s_sm = smooth_weighted(0.0, 2.0, 0.0, 2.0, 0.5)
    inj = inject_rp_uncertainty(FaiValue(3.0, "wd", "wifi"), 4.0).value
    mcm = fai_mcm(3.0, 5.0, 4.0).value
    mc = fai_mc(2.0, 2.0, 2.0, rho=(0.2, 0.3, 0.5)).value
    mc2 = fai_mc(1.0, 2.0, 3.0, rho=(0.2, 0.3, 0.5)).value
    H = np.array([[0, 1], [0, -1], [1, 0], [-1, 0]], dtype=float)
    peak = likelihood({"a": -50.0}, Fingerprint((0, 0), (0, 0), 0.0, {"a": FeatureStats(-50.0, 1.0, 30)}, 30))
    checks = {
        "skew antisymmetric": anti,
        "smoothing sqrt2": abs(s_sm - math.sqrt(2)) <= tol,
        "injection 3,4->5": abs(inj - 5.0) <= tol,
        "mcm max": mcm == 5.0,
        "mc rho=(.2,.3,.5)": abs(mc - 2.0) <= tol and abs(mc2 - 2.3) <= tol,
        "4-AP DOP 1": abs(dop(H) - 1.0) <= tol,
        "Gaussian peak": abs(peak - 1 / math.sqrt(2 * math.pi)) <= tol,
    }
    report(1, "formula-exact checks", checks, time.perf_counter() - t0, 1.0)


def test_criterion_2_ap_least_squares():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    ap, beta = np.array([20.0, 20.0]), (2.0, -40.0)
    pts = rng.uniform(0, 40, (50, 2))
    e0 = estimate_ap(pts, path_loss_rss(np.linalg.norm(pts - ap, axis=1), *beta))
    noiseless = max(abs(e0.x - 20), abs(e0.y - 20), abs(e0.beta1 - 2), abs(e0.beta2 + 40))
    est, cov = [], []
    for _ in range(100):
        pts = rng.uniform(0, 40, (100, 2))
        r = path_loss_rss(np.linalg.norm(pts - ap, axis=1), *beta) + rng.normal(0, 2.0, 100)
        e = estimate_ap(pts, r, sigma=2.0)
        est.append([e.x, e.y, e.beta1, e.beta2])
        cov.append(np.diag(e.covariance))
    est = np.array(est)
    rms = math.sqrt(np.mean(np.sum((est[:, :2] - ap) ** 2, axis=1)))
    ratio = np.mean((est - [20, 20, 2, -40]) ** 2, axis=0) / np.mean(cov, axis=0)
    checks = {
        f"noiseless max err {noiseless:.1e} < 1e-3": noiseless < 1e-3,
        f"MC position RMS {rms:.2f} m < 2 m": rms < 2.0,
        f"MC/predicted variance {np.round(ratio, 2).tolist()} within 2x": bool(np.all((ratio > 0.5) & (ratio < 2))),
    }
    report(2, "AP least-squares oracle", checks, time.perf_counter() - t0, 30.0)


def test_criterion_3_smoother_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    n = 1000
    worst = 0.0
    for s1, s2 in ((2.0, 2.0), (1.0, 3.0), (5.0, 0.5), (2.5, 4.0)):
        fwd = Track(np.arange(n, dtype=float), rng.normal(0, s1, (n, 2)), s1)
        bwd = Track(np.arange(n, dtype=float), rng.normal(0, s2, (n, 2)), s2)
        sm = smooth(fwd, bwd)
        emp = math.sqrt(np.mean(sm.p_sm**2))
        worst = max(worst, abs(emp / float(sm.sigma_sm[0]) - 1.0))
    report(3, "smoother Monte Carlo", {f"worst relative RMS gap {100 * worst:.1f}% <= 10%": worst <= 0.10},
           time.perf_counter() - t0, 10.0)


def _nees_monte_carlo(world, n_runs=40):
    """Model-matched runs: initial errors drawn from P0, simulated biases follow the filter's model."""
    spec = PathSpec(np.array([[5.0, 5.0], [30.0, 5.0], [30.0, 18.0]]), static_start=2.0, static_end=1.0)
    noise = ImuNoiseModel()
    cfg = DrConfig(use_gravity_update=False, use_mag_update=False, use_zupt=False, use_pdr=False,
                   p0_pos=(0.5,) * 3, p0_vel=(0.05,) * 3, p0_att=(0.5 * DEG,) * 3, p0_bg=(noise.bias_gyro,) * 3,
                   p0_ba=(noise.bias_accel,) * 3)
    P0 = cfg.p0()
    nees = []
    for i in range(n_runs):
        tr, gt = synthesize_trace(world, spec, noise=noise, seed=200 + i)
        dx = np.random.default_rng(i).normal(size=15) * np.sqrt(np.diag(P0))
        st = NavState(p_n=gt.p[0] + dx[:3], v_n=gt.v[0] + dx[3:6], C_bn=(np.eye(3) - skew(dx[6:9])) @ gt.C_bn[0])
        eng = DrEngine(tr.imu, noise=noise, cfg=cfg)
        eng.initialize(0, state=st, P=P0)
        row = []
        for k in range(20, len(tr.imu), 20):
            eng.advance_to(k)
            e = eng.state.p_n - gt.p[k]
            row.append(e @ np.linalg.solve(eng.P[:3, :3], e))
        nees.append(row)
    mean = np.mean(nees, axis=0)
    lo, hi = chi2.ppf([0.025, 0.975], 3 * n_runs) / n_runs
    return float(np.mean((mean >= lo) & (mean <= hi)))


def test_criterion_4_dr_sanity(small_world, walk_60s):
    t0 = time.perf_counter()
    trace, truth = walk_60s
    res = run_dead_reckoning(trace.imu, truth.p[0])
    end = float(np.linalg.norm(res.pos[-1, :2] - truth.p[-1, :2]))

    n, noise = 20 * 30, ImuNoiseModel()
    rng = np.random.default_rng(4)
    g = small_world.env.g
    from fpfuse.dead_reckoning import ImuArrays

    imu = ImuArrays(np.arange(n) * 0.05, rng.normal(0, noise.arw / math.sqrt(0.05), (n, 3)),
                    -g + rng.normal(0, noise.vrw / math.sqrt(0.05), (n, 3)), np.tile(small_world.env.m, (n, 1)))
    eng = DrEngine(imu, noise=noise, cfg=DrConfig(use_pdr=False))
    eng.initialize(19)
    eng.advance_to(100)  # five seconds of ZUPT
    speeds = []
    for k in range(101, n, 10):
        eng.advance_to(k)
        speeds.append(float(np.linalg.norm(eng.state.v_n)))
    frac = _nees_monte_carlo(small_world)
    checks = {
        f"noise-free walk end error {end:.2f} m < 0.5 m": end < 0.5,
        f"static ZUPT max speed {max(speeds):.4f} m/s < 0.05": max(speeds) < 0.05,
        f"NEES inside 95% envelope on {100 * frac:.0f}% of epochs >= 90%": frac >= 0.9,
    }
    report(4, "dead-reckoning sanity", checks, time.perf_counter() - t0, 60.0)


def test_criterion_5_fingerprinting_identity(small_world):
    t0 = time.perf_counter()
    w = small_world
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, [w.cfg.width, w.cfg.height], (int(6 * w.cfg.width * w.cfg.height), 2))
    rss = w.rss(pts, rng)
    samples = [MapSample(tuple(p), 1.0, {a: float(v) for a, v in zip(w.ap_ids, r) if np.isfinite(v)})
               for p, r in zip(pts, rss)]
    db = build_database(samples, "wifi")
    err = []
    for k in db.keys:
        c = db.cells[k].rp_location
        q = {a: float(v) for a, v in zip(w.ap_ids, w.mean_rss(c)[0]) if v >= w.cfg.rss_floor}
        err.append(float(np.linalg.norm(match(q, db).position - c)))
    med = float(np.median(err))
    report(5, "fingerprinting identity", {f"median error {med:.2f} m <= {db.cell_length / 2:g} m over {len(err)} RPs":
                                         med <= db.cell_length / 2}, time.perf_counter() - t0, 10.0)


def test_criterion_6_fai_correlation(benchmark_run):
    results, elapsed = benchmark_run
    corr = pooled_correlations(results, "wifi")
    n = sum(len(r.fixes["wifi"]["error"]) for r in results)
    checks = {
        f"{n} WiFi epochs >= 1000": n >= 1000,
        f"corr WD {corr['wd']:.3f} > SS {corr['ss']:.3f}": corr["wd"] > corr["ss"],
        f"corr WD {corr['wd']:.3f} > 0.2": corr["wd"] > 0.2,
        f"corr CT {corr['ct']:.3f} == 0": corr["ct"] == 0.0,
        f"benchmark {elapsed:.0f}s < 300s": elapsed < 300,
    }
    report(6, "FAI correlation direction (10 seeds)", checks)


def test_criterion_7_headline_direction(benchmark_run):
    results, elapsed = benchmark_run
    rms, mx = median_improvement(results, "mcm", "ct")
    checks = {
        f"median RMS reduction {rms:.1f}% >= 10%": rms >= 10.0,
        f"median max reduction {mx:.1f}% >= 20%": mx >= 20.0,
        f"benchmark {elapsed:.0f}s < 600s": elapsed < 600,
    }
    report(7, "DWM-MCM vs DWM-CT with injected outliers (10 seeds)", checks)


def test_criterion_8_cli_determinism(tmp_path):
    cfg = tmp_path / "small.json"
    cfg.write_text(SMALL_CONFIG)
    out = tmp_path / "out"
    codes = run_cli_pipeline(out, cfg, strategies=("ct", "wd", "mcm"))
    first = tree_digest(out)
    codes += run_cli_pipeline(out, cfg, strategies=("ct", "wd", "mcm"))
    second = tree_digest(out)
    differ = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    checks = {
        "all stages exit 0": codes == [0] * len(codes),
        f"{len(first)} output files byte-identical on rerun": not differ and len(first) > 20,
    }
    report(8, "CLI determinism", checks)
