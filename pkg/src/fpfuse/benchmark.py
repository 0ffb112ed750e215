"""End-to-end synthetic benchmark: survey, crowdsource, build maps, fuse test walks.

One seed produces a world, ``n_survey`` anchor-bounded survey walks by users with
individually varying step-length constants, crowdsourced WiFi and magnetic
databases, and ``n_test`` test walks.  Each test walk is run once without RSS
outliers (for FAI/error correlations) and once with outliers (for the strategy
comparison).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from fpfuse.config import Config
from fpfuse.core import ErrorStats, correlation, error_stats
from fpfuse.crowdsourcing import SegmentCandidate, dead_reckon_segment, select_segments, smooth_segment
from fpfuse.fai import STRATEGIES, attach_dsf
from fpfuse.fusion import FusionOutput, run_pipeline
from fpfuse.mapping import FingerprintDatabase, MapSample, build_database, fit_aps, magnetic_samples, wifi_samples
from fpfuse.simulation import World, generate_world, make_rng, random_path, synthesize_trace
from fpfuse.traceio import GroundTruth, SensorTrace

log = logging.getLogger(__name__)

_SURVEY_SEED = 1000
_TEST_SEED = 1500
_K_STREAM = 9


@dataclass
class Scenario:
    world: World
    survey: list[tuple[SensorTrace, GroundTruth]]
    tests: list[tuple[SensorTrace, GroundTruth]]
    tests_clean: list[tuple[SensorTrace, GroundTruth]]


@dataclass
class CrowdsourcedMaps:
    wifi: FingerprintDatabase
    magnetic: FingerprintDatabase
    wifi_samples: list[MapSample]
    magnetic_samples: list[MapSample]
    candidates: list[SegmentCandidate]
    selected: list[str]


def simulate_scenario(seed: int, cfg: Config | None = None) -> Scenario:
    """Deterministic world plus survey and test walks for ``seed``."""
    cfg = cfg or Config()
    sim = cfg.simulation
    wcfg = sim.world.__class__(**{**sim.world.__dict__, "seed": int(seed)})
    world = generate_world(wcfg)
    rng_k = make_rng(seed, _K_STREAM)
    base = sim.trace
    survey_cfg = base.__class__(**{**base.__dict__, "wifi_rate": sim.survey_wifi_rate, "anchors": True,
                                   "outlier_rate": 0.0})
    survey = []
    for i in range(sim.n_survey):
        s = seed * _SURVEY_SEED * 10 + i
        spec = random_path(world, s, sim.survey_length, weinberg_k=float(rng_k.uniform(*sim.user_k_range)))
        survey.append(synthesize_trace(world, spec, noise=cfg.imu_noise, cfg=survey_cfg, seed=s,
                                       trace_id=f"survey-{i:03d}"))
    tests, clean = [], []
    for j in range(sim.n_test):
        s = seed * _SURVEY_SEED * 10 + _TEST_SEED + j
        spec = random_path(world, s, sim.test_length, weinberg_k=float(rng_k.uniform(*sim.user_k_range)))
        for outl, dest in ((sim.outlier_rate, tests), (0.0, clean)):
            tcfg = base.__class__(**{**base.__dict__, "outlier_rate": outl})
            dest.append(synthesize_trace(world, spec, noise=cfg.imu_noise, cfg=tcfg, seed=s, trace_id=f"test-{j:03d}"))
    return Scenario(world, survey, tests, clean)


def crowdsource_maps(traces: list[SensorTrace], cfg: Config | None = None) -> CrowdsourcedMaps:
    """Select and smooth survey walks, then build both databases, fit APs and attach DSF."""
    cfg = cfg or Config()
    mc = cfg.mapping
    cands = [dead_reckon_segment(tr.trace_id, tr.imu, tr.anchors, cfg.env, cfg.imu_noise, cfg.dr) for tr in traces]
    keep = select_segments(cands, cfg.crowd.lambda_d)
    by_id = {tr.trace_id: tr for tr in traces}
    ws: list[MapSample] = []
    ms: list[MapSample] = []
    for c in keep:
        tr = by_id[c.trace_id]
        sm = smooth_segment(c)
        ws += wifi_samples(sm, tr.rss)
        ks = [s.index for s in c.forward.steps]
        if ks:
            C = np.array([c.forward.attitude[k] for k in ks])
            ms += magnetic_samples(sm, tr.imu.t[ks], tr.imu.mag[ks], C)
    dbs = []
    for modality, samples in (("wifi", ws), ("magnetic", ms)):
        db = build_database(samples, modality, mc.cell_length, mc.lambda_n1, mc.lambda_n2,
                            mc.default_variance(modality), min_variance=mc.min_variance(modality))
        dbs.append(db)
    dbs[0].aps = fit_aps(ws, sigma=mc.ap_sigma, min_obs=mc.ap_min_obs)
    for db in dbs:
        if len(db) > cfg.fai.kappa_d:
            attach_dsf(db, cfg.fai.kappa_d)
    return CrowdsourcedMaps(dbs[0], dbs[1], ws, ms, cands, [c.trace_id for c in keep])


@dataclass
class SeedResult:
    seed: int
    maps: CrowdsourcedMaps
    fixes: dict[str, dict[str, NDArray]]  # modality -> column -> values, clean test walks
    errors: dict[str, NDArray]  # strategy -> fused errors over the outlier test walks
    outputs: dict[str, list[FusionOutput]] = field(default_factory=dict)

    def stats(self) -> dict[str, ErrorStats]:
        return {s: error_stats(e[np.isfinite(e)]) for s, e in self.errors.items()}

    def improvement(self, strategy: str = "mcm", reference: str = "ct") -> tuple[float, float]:
        """Percentage (RMS, max) reduction of ``strategy`` relative to ``reference``."""
        st = self.stats()
        a, b = st[reference], st[strategy]
        return 100.0 * (a.rms_m - b.rms_m) / a.rms_m, 100.0 * (a.max_m - b.max_m) / a.max_m


def _concat_fixes(outs: list[FusionOutput], modality: str) -> dict[str, NDArray]:
    tabs = [o.fix_table(modality) for o in outs]
    return {k: np.concatenate([t[k] for t in tabs]) for k in tabs[0]}


def run_seed(seed: int, cfg: Config | None = None, strategies=STRATEGIES, mode: str = "dwm",
             keep_outputs: bool = False) -> SeedResult:
    cfg = cfg or Config()
    sc = simulate_scenario(seed, cfg)
    maps = crowdsource_maps([tr for tr, _ in sc.survey], cfg)
    fcfg = cfg.fusion_config()
    kw = dict(cfg=fcfg, env=cfg.env, noise=cfg.imu_noise, dr_cfg=cfg.dr)
    clean = [run_pipeline(tr, maps.wifi, maps.magnetic, cfg.strategy_for("ct"), mode, truth=gt, **kw)
             for tr, gt in sc.tests_clean]
    fixes = {m: _concat_fixes(clean, m) for m in ("wifi", "magnetic")}
    errors: dict[str, NDArray] = {}
    outputs: dict[str, list[FusionOutput]] = {"clean": clean} if keep_outputs else {}
    for s in strategies:
        outs = [run_pipeline(tr, maps.wifi, maps.magnetic, cfg.strategy_for(s), mode, truth=gt, **kw)
                for tr, gt in sc.tests]
        errors[s] = np.concatenate([o.error for o in outs])
        if keep_outputs:
            outputs[s] = outs
    log.info("seed %d: %d/%d survey walks kept, %d WiFi / %d magnetic cells", seed, len(maps.selected),
             len(maps.candidates), len(maps.wifi), len(maps.magnetic))
    return SeedResult(seed, maps, fixes, errors, outputs)


def pooled_correlations(results: list[SeedResult], modality: str = "wifi") -> dict[str, float]:
    """Correlation of every FAI series with the actual fix errors, pooled over seeds."""
    err = np.concatenate([r.fixes[modality]["error"] for r in results])
    return {s: correlation(err, np.concatenate([r.fixes[modality][s] for r in results])).coef for s in STRATEGIES}


def median_improvement(results: list[SeedResult], strategy: str = "mcm", reference: str = "ct") -> tuple[float, float]:
    imp = np.array([r.improvement(strategy, reference) for r in results])
    return float(np.median(imp[:, 0])), float(np.median(imp[:, 1]))
