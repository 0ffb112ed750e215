"""DR / WiFi / magnetic integration with FAI-driven measurement noise.

The dead-reckoning EKF of :mod:`fpfuse.dead_reckoning` provides the prediction.
WiFi fixes and wireless-aided magnetic profile fixes enter as 2-D position
updates with ``R = diag(eta^2, eta^2)`` where ``eta`` comes from the selected
strategy.  WiFi is applied before magnetic when both land on the same sample.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray

from fpfuse import kernels
from fpfuse.core import ErrorStats, error_stats
from fpfuse.dead_reckoning import (
    DrConfig,
    DrEngine,
    EnvironmentReference,
    ErrorState,
    ImuNoiseModel,
    NavState,
    ImuArrays,
    apply_correction,
    static_flags,
)
from fpfuse.fai import (
    STRATEGIES,
    FaiConfig,
    FaiValue,
    fai_mc,
    fai_mcm,
    fai_sd_mag,
    fai_sd_wifi,
    fai_ss_mag,
    fai_ss_wifi,
    fai_wd,
    inject_rp_uncertainty,
)
from fpfuse.fingerprinting import MatchResult, NoCandidatesError, Region, match, match_magnetic_constrained, match_profile
from fpfuse.mapping import FingerprintDatabase, MagneticProfile, RssObservation, leveled_components
from fpfuse.traceio import GroundTruth, SensorTrace

log = logging.getLogger(__name__)

MODES = ("dw", "dm", "dwm")


class InitializationError(RuntimeError):
    """No usable WiFi fix within the initialization window."""


@dataclass(frozen=True)
class Strategy:
    """FAI strategy with the constant-accuracy values used by CT."""

    name: str = "ct"
    ct_wifi: float = 6.0
    ct_mag: float = 5.0

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; expected one of {STRATEGIES}")
        if not (self.ct_wifi > 0 and self.ct_mag > 0):
            raise ValueError("CT values must be positive")


@dataclass(frozen=True)
class FusionConfig:
    kappa: int = 5
    mag_window: int = 10
    mag_interval: int = 4
    radius_factor: float = 3.0
    dm_min_radius: float = 5.0
    init_window: float = 30.0
    init_sigma: float = 6.0
    gate: bool = False
    gate_factor: float = 6.0
    output_rate: float = 1.0
    min_shared_wifi: int = 3
    inject_rp: bool = True
    fai: FaiConfig = field(default_factory=FaiConfig)


def initial_static_end(imu: ImuArrays, cfg: DrConfig | None = None) -> float:
    """Time the device first moves if the trace starts at rest, else the first sample time."""
    cfg = cfg or DrConfig()
    flags = static_flags(imu.t, imu.accel, imu.gyro, cfg)
    on = np.flatnonzero(flags)
    if len(on) == 0 or imu.t[on[0]] - imu.t[0] > cfg.static_window_s + 1e-9:
        return float(imu.t[0])
    off = np.flatnonzero(~flags[on[0]:])
    return float(imu.t[on[0] + off[0]]) if len(off) else float(imu.t[-1])


def position_update(err: ErrorState | None, P: NDArray, p_pred: ArrayLike, p_meas: ArrayLike, fai: FaiValue | float,
                    gate: float | None = None) -> tuple[ErrorState, NDArray, bool]:
    """2-D position update of the error state.

    The innovation is ``p_pred - p_meas`` observed through ``H = [I_2 0]`` with
    ``R = eta^2 I_2``.  With ``gate`` set, innovations longer than ``gate * eta``
    are rejected and ``(err, P, False)`` is returned unchanged.
    """
    eta = fai.value if isinstance(fai, FaiValue) else float(fai)
    if not eta > 0:
        raise ValueError("eta must be positive")
    n = P.shape[0]
    x = np.zeros(n) if err is None else err.as_vector()
    z = (np.asarray(p_pred, dtype=float)[:2] - np.asarray(p_meas, dtype=float)[:2]) - x[:2]
    if gate is not None and float(np.hypot(*z)) > gate * eta:
        return err if err is not None else ErrorState(), P, False
    H = np.zeros((2, n))
    H[0, 0] = H[1, 1] = 1.0
    R = np.eye(2) * eta * eta
    P = np.ascontiguousarray(P, dtype=float).copy()
    dx = kernels.kf_update(P, H, R, z)
    return ErrorState.from_vector(x + dx), P, True


def _apply_position_fix(state: NavState, P: NDArray, p_meas: NDArray, eta: float, gate: float | None) -> bool:
    """In-place closed-loop position update on the navigation state."""
    z = state.p_n[:2] - p_meas[:2]
    if gate is not None and float(np.hypot(*z)) > gate * eta:
        return False
    H = np.zeros((2, 15))
    H[0, 0] = H[1, 1] = 1.0
    dx = kernels.kf_update(P, H, np.eye(2) * eta * eta, z)
    apply_correction(state, dx)
    return True


@dataclass
class FixRecord:
    """One fingerprinting fix with every FAI and the value actually used."""

    t: float
    modality: str
    position: NDArray[np.float64]
    fai: dict[str, float]
    eta: float
    applied: bool
    fallback: bool = False
    error: float = float("nan")


@dataclass
class FusionOutput:
    t: NDArray[np.float64]
    position: NDArray[np.float64]
    covariance: NDArray[np.float64]
    eta_wifi: NDArray[np.float64]
    eta_mag: NDArray[np.float64]
    error: NDArray[np.float64] | None
    fixes: list[FixRecord]
    strategy: str
    mode: str
    counts: dict[str, int]

    def stats(self) -> ErrorStats:
        if self.error is None:
            raise ValueError("no truth supplied")
        e = self.error[np.isfinite(self.error)]
        return error_stats(e)

    def fix_table(self, modality: str) -> dict[str, NDArray]:
        recs = [f for f in self.fixes if f.modality == modality]
        out = {"t": np.array([f.t for f in recs]), "error": np.array([f.error for f in recs])}
        for name in STRATEGIES:
            out[name] = np.array([f.fai.get(name, np.nan) for f in recs])
        return out

    def to_csv(self, manifest: str | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if manifest:
            buf.write(f"# manifest: {manifest}\n")
        w.writerow(["t", "x", "y", "eta_wifi", "eta_mag", "err"])
        for k in range(len(self.t)):
            err = "" if self.error is None or not np.isfinite(self.error[k]) else repr(float(self.error[k]))
            ew = "" if not np.isfinite(self.eta_wifi[k]) else repr(float(self.eta_wifi[k]))
            em = "" if not np.isfinite(self.eta_mag[k]) else repr(float(self.eta_mag[k]))
            w.writerow([repr(float(self.t[k])), repr(float(self.position[k, 0])), repr(float(self.position[k, 1])),
                        ew, em, err])
        return buf.getvalue()


class FaiEvaluator:
    """Computes all FAI values for a fix so that strategies can be compared."""

    def __init__(self, db: FingerprintDatabase, strategy: Strategy, cfg: FusionConfig):
        self.db = db
        self.strategy = strategy
        self.cfg = cfg
        dsf = db.arrays["dsf"]
        self.dsf = np.where(np.isfinite(dsf), dsf, cfg.fai.sentinel)

    def evaluate(self, m: MatchResult, ss: FaiValue, sd: FaiValue) -> dict[str, float]:
        fcfg = self.cfg.fai
        wd = fai_wd(m, self.dsf[m.rows], fcfg)
        if self.cfg.inject_rp:
            s = m.rp_sigma(self.db)
            ss, sd, wd = (inject_rp_uncertainty(v, s, fcfg) for v in (ss, sd, wd))
        ct = self.strategy.ct_wifi if self.db.modality == "wifi" else self.strategy.ct_mag
        return {
            "ct": ct,
            "ss": ss.value,
            "sd": sd.value,
            "wd": wd.value,
            "mc": fai_mc(ss, sd, wd, fcfg.rho).value,
            "mcm": fai_mcm(ss, sd, wd).value,
        }


def fingerprint_wifi(obs: RssObservation, db: FingerprintDatabase, evaluator: FaiEvaluator,
                     cfg: FusionConfig) -> tuple[MatchResult, dict[str, float]]:
    """WiFi fix for one scan together with every FAI value.

    Raises :class:`NoCandidatesError` when no fingerprint shares enough APs.
    """
    q = obs.usable()
    m = match(q, db, cfg.kappa, min_shared=cfg.min_shared_wifi)
    ss = fai_ss_wifi(q, db.aps, cfg.fai)
    sd = fai_sd_wifi(m.position, [db.aps[a].position for a in sorted(q) if a in db.aps], cfg.fai)
    return m, evaluator.evaluate(m, ss, sd)


def run_pipeline(trace: SensorTrace, db_wifi: FingerprintDatabase | None, db_mag: FingerprintDatabase | None = None,
                 strategy: Strategy | str = "ct", mode: str = "dwm", cfg: FusionConfig | None = None,
                 env: EnvironmentReference | None = None, noise: ImuNoiseModel | None = None,
                 dr_cfg: DrConfig | None = None, truth: GroundTruth | None = None,
                 start: tuple[float, ArrayLike] | None = None) -> FusionOutput:
    """Fuse one trace.

    Unless ``start = (t0, p0)`` is given, the filter starts from the first WiFi
    fix within ``cfg.init_window`` seconds; further fixes taken while the device
    is still at rest are averaged in and the filter starts at the last of them.  Modes: ``dw`` (WiFi only), ``dm``
    (magnetic only, search circle around the fused position) and ``dwm`` (both,
    magnetic search around the latest WiFi fix).  Mode ``dr`` applies no fixes.
    """
    cfg = cfg or FusionConfig()
    strategy = Strategy(strategy) if isinstance(strategy, str) else strategy
    mode = mode.lower()
    if mode not in MODES + ("dr",):
        raise ValueError(f"unknown mode {mode!r}")
    use_wifi = mode in ("dw", "dwm")
    use_mag = mode in ("dm", "dwm")
    if use_wifi and db_wifi is None:
        raise ValueError(f"mode {mode} needs a WiFi database")
    if use_mag and db_mag is None:
        raise ValueError(f"mode {mode} needs a magnetic database")
    imu = trace.imu
    fcfg = cfg.fai
    gate = cfg.gate_factor if cfg.gate else None
    wifi_eval = FaiEvaluator(db_wifi, strategy, cfg) if db_wifi is not None and len(db_wifi) else None
    mag_eval = FaiEvaluator(db_mag, strategy, cfg) if db_mag is not None and len(db_mag) else None

    def wifi_fix(obs):
        return fingerprint_wifi(obs, db_wifi, wifi_eval, cfg)

    # -- initialization ---------------------------------------------------
    scans = sorted(trace.rss, key=lambda o: o.t)
    t_first = float(imu.t[0])
    dr_cfg = dr_cfg or DrConfig()
    init_fixes = []
    if start is not None:
        t_init, p_init = float(start[0]), np.asarray(start[1], dtype=float)
    else:
        if db_wifi is None:
            raise InitializationError("initialization needs a WiFi database")
        t_still = initial_static_end(imu, dr_cfg)
        for obs in scans:
            if obs.t - t_first > cfg.init_window or (init_fixes and obs.t > t_still):
                break
            try:
                m, fai = wifi_fix(obs)
            except NoCandidatesError:
                continue
            init_fixes.append((obs, m, fai))
        if not init_fixes:
            raise InitializationError(f"no WiFi fix in the first {cfg.init_window:g} s")
        # fixes taken before the device moves are averaged with 1/eta^2 weights
        wts = np.array([1.0 / f[2][strategy.name] ** 2 for f in init_fixes])
        p_init = (wts[:, None] * np.array([f[1].position for f in init_fixes])).sum(axis=0) / wts.sum()
        t_init = float(init_fixes[-1][0].t)
    k0 = imu.index_of(t_init)

    eng = DrEngine(imu, env, noise, dr_cfg)
    P0 = replace(dr_cfg, p0_pos=(cfg.init_sigma, cfg.init_sigma, cfg.init_sigma)).p0()
    eng.initialize(k0, P=P0, p_n=np.array([p_init[0], p_init[1], 0.0]))

    # -- external events --------------------------------------------------
    events: list[tuple[int, int, object]] = []
    if use_wifi:
        for obs in scans:
            k = imu.index_of(obs.t)
            if k > k0:
                events.append((k, 0, obs))
    if use_mag:
        for s in eng.steps:
            k = s.index if s.index >= 0 else imu.index_of(s.t)
            if k > k0:
                events.append((k, 1, s))
    events.sort(key=lambda e: (e[0], e[1]))

    n_out = max(1, int(math.floor((imu.t[-1] - imu.t[k0]) * cfg.output_rate + 1e-9)) + 1)
    t_out = imu.t[k0] + np.arange(n_out) / cfg.output_rate
    k_out = np.array([imu.index_of(t) for t in t_out])
    pos_out = np.full((n_out, 2), np.nan)
    cov_out = np.full((n_out, 2, 2), np.nan)
    eta_w = np.full(n_out, np.nan)
    eta_m = np.full(n_out, np.nan)
    fixes: list[FixRecord] = []
    counts = {"wifi": 0, "wifi_gated": 0, "wifi_nomatch": 0, "mag": 0, "mag_gated": 0, "mag_nomatch": 0,
              "mag_fallback": 0}

    def slot(t):
        return min(n_out - 1, max(0, int(math.ceil((t - t_out[0]) * cfg.output_rate - 1e-9))))

    buf_mag: list[NDArray] = []
    buf_att: list[NDArray] = []
    buf_xy: list[NDArray] = []
    rel = np.zeros(2)
    steps_since = 0
    last_wifi: tuple[NDArray, float, NDArray] | None = None  # (fix position, eta, state position then)

    for obs, m, fai in init_fixes:
        fixes.append(FixRecord(obs.t, "wifi", m.position.copy(), fai, fai[strategy.name], False))
    if init_fixes:
        eta0 = float(1.0 / math.sqrt(wts.sum()))
        last_wifi = (np.asarray(p_init[:2], dtype=float).copy(), eta0, eng.state.p_n[:2].copy())

    oi = 0

    def emit_until(k):
        nonlocal oi
        while oi < n_out and k_out[oi] <= k:
            eng.advance_to(k_out[oi])
            pos_out[oi] = eng.state.p_n[:2]
            cov_out[oi] = eng.P[:2, :2]
            oi += 1

    for k, kind, payload in events:
        emit_until(k - 1)
        eng.advance_to(k)
        st = eng.state
        if kind == 0:
            obs = payload
            try:
                m, fai = wifi_fix(obs)
            except NoCandidatesError:
                counts["wifi_nomatch"] += 1
                continue
            eta = fai[strategy.name]
            ok = _apply_position_fix(st, eng.P, m.position, eta, gate)
            counts["wifi" if ok else "wifi_gated"] += 1
            fixes.append(FixRecord(obs.t, "wifi", m.position.copy(), fai, eta, ok))
            eta_w[slot(obs.t)] = eta
            last_wifi = (m.position.copy(), eta, st.p_n[:2].copy())
            eng.mark()
        else:
            step = payload
            C = eng.attitude.get(k, st.C_bn)
            heading = math.atan2(C[1, 0], C[0, 0])
            rel = rel + step.length * np.array([math.cos(heading), math.sin(heading)])
            buf_mag.append(imu.mag[k].copy())
            buf_att.append(C.copy())
            buf_xy.append(rel.copy())
            steps_since += 1
            if len(buf_mag) > cfg.mag_window:
                del buf_mag[0], buf_att[0], buf_xy[0]
            if len(buf_mag) < cfg.mag_window or steps_since < cfg.mag_interval:
                continue
            steps_since = 0
            h, v = leveled_components(np.array(buf_mag), np.array(buf_att))
            xy = np.array(buf_xy)
            prof = MagneticProfile(h - h[0], v - v[0], xy - xy[-1], float(imu.t[k]))
            try:
                if mode == "dwm" and last_wifi is not None:
                    center = last_wifi[0] + (st.p_n[:2] - last_wifi[2])
                    m = match_magnetic_constrained(prof, db_mag, center, last_wifi[1], cfg.kappa, cfg.radius_factor)
                else:
                    sig = math.sqrt(max(0.5 * (eng.P[0, 0] + eng.P[1, 1]), 0.0))
                    radius = max(cfg.dm_min_radius, cfg.radius_factor * sig)
                    try:
                        m = match_profile(prof, db_mag, cfg.kappa, Region(tuple(st.p_n[:2]), radius))
                    except NoCandidatesError:
                        m = match_profile(prof, db_mag, cfg.kappa, None)
                        m.fallback = True
            except NoCandidatesError:
                counts["mag_nomatch"] += 1
                continue
            counts["mag_fallback"] += int(m.fallback)
            ss = fai_ss_mag(prof, fcfg)
            sd = fai_sd_mag(prof, fcfg)
            fai = mag_eval.evaluate(m, ss, sd)
            eta = fai[strategy.name]
            ok = _apply_position_fix(st, eng.P, m.position, eta, gate)
            counts["mag" if ok else "mag_gated"] += 1
            fixes.append(FixRecord(float(imu.t[k]), "magnetic", m.position.copy(), fai, eta, ok, m.fallback))
            eta_m[slot(float(imu.t[k]))] = eta
            eng.mark()
    emit_until(len(imu) - 1)
    while oi < n_out:
        pos_out[oi] = eng.state.p_n[:2]
        cov_out[oi] = eng.P[:2, :2]
        oi += 1

    err = None
    if truth is not None:
        tp = truth.position_at(t_out)
        err = np.linalg.norm(pos_out - tp, axis=1)
        for f in fixes:
            f.error = float(np.linalg.norm(f.position - truth.position_at(f.t)[0]))
    counts.update({f"dr_{k}": v for k, v in eng.counts.items()})
    return FusionOutput(t_out, pos_out, cov_out, eta_w, eta_m, err, fixes, strategy.name, mode, counts)
