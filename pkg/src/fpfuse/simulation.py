"""Synthetic world, pedestrian trajectories and sensor traces with ground truth.

All randomness comes from numpy's PCG64 generator seeded through ``SeedSequence``,
so a (config, seed) pair always yields the same world and traces.

Trajectories are generated so that the strapdown mechanization in
:mod:`fpfuse.dead_reckoning` reproduces them exactly when fed noise-free data:
the gyro sample at ``t_k`` is the rotation vector of ``C_{k-1}^T C_k`` divided by
``dt``, the specific force is ``C_mid^T (a_n - g_n)`` with the mid-interval
attitude, and truth positions are the trapezoid integral of truth velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from fpfuse._pykernels import rotation_vector_to_dcm
from fpfuse.crowdsourcing import Anchor
from fpfuse.dead_reckoning import EnvironmentReference, ImuArrays, ImuNoiseModel, dcm_from_euler
from fpfuse.mapping import RSS_ABSENT, RSS_MIN, RssObservation
from fpfuse.traceio import GroundTruth, SensorTrace


def make_rng(seed: int | None, *keys: int) -> np.random.Generator:
    """PCG64 generator for ``seed`` and an optional stream key path."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed or 0), *map(int, keys)])))


@dataclass(frozen=True)
class AccessPoint:
    ap_id: str
    x: float
    y: float
    beta1: float
    beta2: float


@dataclass(frozen=True)
class Dipole:
    x: float
    y: float
    depth: float
    moment: tuple[float, float, float]  # Gauss * m^3


@dataclass(frozen=True)
class WorldConfig:
    width: float = 64.0
    height: float = 36.0
    n_aps: int = 10
    # x0, x1, y0, y1 as area fractions; the default leaves an east wing with AP coverage only from afar
    ap_region: tuple[float, float, float, float] = (0.0, 0.55, 0.0, 1.0)
    beta1_range: tuple[float, float] = (1.8, 3.0)
    beta2_range: tuple[float, float] = (-45.0, -35.0)
    rss_noise: float = 3.0
    shadowing_sigma: float = 3.0
    shadowing_length: float = 6.0
    shadowing_terms: int = 24
    rss_floor: float = RSS_ABSENT
    base_field: tuple[float, float, float] = (0.16, 0.0, 0.52)
    n_dipoles: int = 20
    dipole_depth: tuple[float, float] = (1.0, 2.0)
    dipole_moment: tuple[float, float] = (0.06, 0.25)
    mag_noise: float = 0.003
    seed: int = 0

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError("world area must be positive")


class World:
    """Queryable radio and magnetic environment.

    ``rss`` follows the log-distance model plus a smooth per-AP shadowing field;
    ``mag`` is the base field plus point-dipole anomalies below the floor.
    """

    def __init__(self, cfg: WorldConfig, aps: list[AccessPoint], dipoles: list[Dipole],
                 shadow: tuple[NDArray, NDArray, NDArray] | None = None):
        self.cfg = cfg
        self.aps = list(aps)
        self.dipoles = list(dipoles)
        self._ap_xy = np.array([[a.x, a.y] for a in self.aps]).reshape(-1, 2)
        self._b1 = np.array([a.beta1 for a in self.aps])
        self._b2 = np.array([a.beta2 for a in self.aps])
        self._shadow = shadow
        self.env = EnvironmentReference(m_n=tuple(cfg.base_field))

    @property
    def ap_ids(self) -> list[str]:
        return [a.ap_id for a in self.aps]

    def contains(self, p: ArrayLike, margin: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float).reshape(-1, 2)
        return bool(np.all((p[:, 0] >= margin) & (p[:, 0] <= self.cfg.width - margin)
                           & (p[:, 1] >= margin) & (p[:, 1] <= self.cfg.height - margin)))

    def shadowing(self, p: ArrayLike) -> NDArray[np.float64]:
        """Smooth shadowing in dB, shape ``(n_points, n_aps)``."""
        p = np.asarray(p, dtype=float).reshape(-1, 2)
        if self._shadow is None or self.cfg.shadowing_sigma == 0:
            return np.zeros((len(p), len(self.aps)))
        k, phase, amp = self._shadow  # (n_ap, K, 2), (n_ap, K), scalar per term
        arg = np.einsum("pd,akd->pak", p, k) + phase[None]
        return amp * np.cos(arg).sum(axis=2)

    def mean_rss(self, p: ArrayLike, shadowing: bool = True) -> NDArray[np.float64]:
        """Noise-free RSS in dBm, shape ``(n_points, n_aps)``."""
        p = np.asarray(p, dtype=float).reshape(-1, 2)
        d = np.linalg.norm(p[:, None, :] - self._ap_xy[None], axis=2)
        d = np.maximum(d, 0.5)
        r = -10.0 * self._b1[None] * np.log10(d) + self._b2[None]
        if shadowing:
            r = r + self.shadowing(p)
        return r

    def rss(self, p: ArrayLike, rng: np.random.Generator | None = None) -> NDArray[np.float64]:
        """Measured RSS; readings below the detection floor are NaN."""
        r = self.mean_rss(p)
        if rng is not None and self.cfg.rss_noise > 0:
            r = r + rng.normal(0.0, self.cfg.rss_noise, size=r.shape)
        r = np.minimum(r, 0.0)
        r = np.where(r < self.cfg.rss_floor, np.nan, np.maximum(r, RSS_MIN))
        return r

    def scan(self, p: ArrayLike, t: float, rng: np.random.Generator | None = None) -> RssObservation:
        r = self.rss(p, rng)[0]
        return RssObservation(float(t), {ap: float(v) for ap, v in zip(self.ap_ids, r) if np.isfinite(v)})

    def anomaly(self, p: ArrayLike) -> NDArray[np.float64]:
        """Dipole field at floor level (z = 0), NED components, shape ``(n, 3)``."""
        p = np.asarray(p, dtype=float).reshape(-1, 2)
        out = np.zeros((len(p), 3))
        for dp in self.dipoles:
            r = np.column_stack([p[:, 0] - dp.x, p[:, 1] - dp.y, np.full(len(p), -dp.depth)])
            rn = np.linalg.norm(r, axis=1)
            u = r / rn[:, None]
            m = np.asarray(dp.moment)
            out += (3.0 * (u @ m)[:, None] * u - m[None]) / rn[:, None] ** 3
        return out

    def mag(self, p: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(self.cfg.base_field, dtype=float)[None] + self.anomaly(p)

    def true_aps(self) -> dict[str, dict]:
        return {a.ap_id: {"x": a.x, "y": a.y, "beta1": a.beta1, "beta2": a.beta2} for a in self.aps}


def generate_world(cfg: WorldConfig | None = None) -> World:
    cfg = cfg or WorldConfig()
    rng = make_rng(cfg.seed, 1)
    aps = []
    x0, x1, y0, y1 = cfg.ap_region
    for i in range(cfg.n_aps):
        x = rng.uniform(max(2.0, x0 * cfg.width), min(cfg.width - 2.0, x1 * cfg.width))
        y = rng.uniform(max(2.0, y0 * cfg.height), min(cfg.height - 2.0, y1 * cfg.height))
        aps.append(AccessPoint(f"ap{i:02d}", float(x), float(y),
                               float(rng.uniform(*cfg.beta1_range)), float(rng.uniform(*cfg.beta2_range))))
    dipoles = []
    for _ in range(cfg.n_dipoles):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        m = direction * rng.uniform(*cfg.dipole_moment)
        dipoles.append(Dipole(float(rng.uniform(0.0, cfg.width)), float(rng.uniform(0.0, cfg.height)),
                              float(rng.uniform(*cfg.dipole_depth)), tuple(float(v) for v in m)))
    shadow = None
    if cfg.shadowing_sigma > 0 and cfg.n_aps > 0:
        K = cfg.shadowing_terms
        k = rng.normal(0.0, 1.0 / cfg.shadowing_length, size=(cfg.n_aps, K, 2))
        phase = rng.uniform(0.0, 2.0 * math.pi, size=(cfg.n_aps, K))
        shadow = (k, phase, cfg.shadowing_sigma * math.sqrt(2.0 / K))
    return World(cfg, aps, dipoles, shadow)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class PathSpec:
    """Waypoint polyline walked at constant cruise speed with filleted turns.

    The walk starts and ends with static periods; speed ramps follow a raised
    cosine of ``ramp`` seconds.  ``roll`` / ``pitch`` are constant device tilts.
    """

    waypoints: NDArray[np.float64]
    speed: float = 1.2
    cadence: float = 2.0
    static_start: float = 5.0
    static_end: float = 3.0
    ramp: float = 0.5
    turn_radius: float = 1.5
    roll: float = 0.0
    pitch: float = 0.0
    gait: bool = True
    weinberg_k: float = 0.4

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float).reshape(-1, 2)
        if len(self.waypoints) < 2:
            raise ValueError("a path needs at least two waypoints")
        if not self.speed > 0:
            raise ValueError("speed must be positive")


class _PlanarCurve:
    """Arc-length parametrized polyline with circular fillets."""

    def __init__(self, pts: NDArray, radius: float):
        segs = []  # ("line", p0, heading, L) | ("arc", center, r, a0, dir, L)
        n = len(pts)
        entry = pts[0]
        for i in range(1, n):
            a, b = pts[i - 1], pts[i]
            h_in = math.atan2(b[1] - a[1], b[0] - a[0])
            if i < n - 1:
                c = pts[i + 1]
                h_out = math.atan2(c[1] - b[1], c[0] - b[0])
                turn = (h_out - h_in + math.pi) % (2 * math.pi) - math.pi
                l_in = np.linalg.norm(b - a)
                l_out = np.linalg.norm(c - b)
                if abs(turn) < 1e-9:
                    tan_len, r = 0.0, 0.0
                else:
                    tan_len = radius * math.tan(abs(turn) / 2)
                    tan_len = min(tan_len, 0.45 * l_in, 0.45 * l_out)
                    r = tan_len / math.tan(abs(turn) / 2)
                start_arc = b - tan_len * np.array([math.cos(h_in), math.sin(h_in)])
                L = float(np.linalg.norm(start_arc - entry))
                if L > 0:
                    segs.append(("line", entry.copy(), h_in, L))
                if r > 0:
                    sgn = 1.0 if turn > 0 else -1.0
                    center = start_arc + sgn * r * np.array([-math.sin(h_in), math.cos(h_in)])
                    a0 = math.atan2(start_arc[1] - center[1], start_arc[0] - center[0])
                    segs.append(("arc", center, r, a0, sgn, r * abs(turn), h_in))
                entry = b + tan_len * np.array([math.cos(h_out), math.sin(h_out)])
            else:
                L = float(np.linalg.norm(b - entry))
                if L > 0:
                    segs.append(("line", entry.copy(), h_in, L))
        self.segs = segs
        self.lengths = np.array([s[3] if s[0] == "line" else s[5] for s in segs])
        self.cum = np.concatenate([[0.0], np.cumsum(self.lengths)])
        self.length = float(self.cum[-1])

    def evaluate(self, s: NDArray) -> tuple[NDArray, NDArray]:
        """Positions ``(n, 2)`` and tangent headings at arc lengths ``s``."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        idx = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.segs) - 1)
        pos = np.zeros((len(s), 2))
        hdg = np.zeros(len(s))
        for j, seg in enumerate(self.segs):
            m = idx == j
            if not np.any(m):
                continue
            u = s[m] - self.cum[j]
            if seg[0] == "line":
                _, p0, h, _ = seg
                pos[m] = p0[None] + u[:, None] * np.array([math.cos(h), math.sin(h)])[None]
                hdg[m] = h
            else:
                _, c, r, a0, sgn, _, h_in = seg
                ang = a0 + sgn * u / r
                pos[m] = c[None] + r * np.column_stack([np.cos(ang), np.sin(ang)])
                hdg[m] = h_in + sgn * u / r
        return pos, hdg


def _distance_profile(t: NDArray, spec: PathSpec, length: float) -> tuple[NDArray, NDArray, float]:
    """Arc length and speed at times ``t``; returns the total walk duration too."""
    vc, Tr = spec.speed, spec.ramp
    if length < vc * Tr:
        Tr = length / vc
    Tc = (length - vc * Tr) / vc
    t1 = spec.static_start
    t2 = t1 + Tr
    t3 = t2 + Tc
    t4 = t3 + Tr
    s = np.zeros_like(t)
    v = np.zeros_like(t)
    half = vc * Tr / 2.0

    up = (t > t1) & (t <= t2)
    tau = t[up] - t1
    s[up] = 0.5 * vc * (tau - Tr / math.pi * np.sin(math.pi * tau / Tr)) if Tr > 0 else 0.0
    v[up] = 0.5 * vc * (1 - np.cos(math.pi * tau / Tr)) if Tr > 0 else 0.0
    cr = (t > t2) & (t <= t3)
    s[cr] = half + vc * (t[cr] - t2)
    v[cr] = vc
    dn = (t > t3) & (t <= t4)
    tau = t[dn] - t3
    if Tr > 0:
        s[dn] = half + vc * Tc + 0.5 * vc * (tau + Tr / math.pi * np.sin(math.pi * tau / Tr))
        v[dn] = 0.5 * vc * (1 + np.cos(math.pi * tau / Tr))
    s[t > t4] = length
    return s, v, t4 - t1


def path_duration(spec: PathSpec) -> float:
    curve = _PlanarCurve(spec.waypoints, spec.turn_radius)
    _, _, walk = _distance_profile(np.zeros(1), spec, curve.length)
    return spec.static_start + walk + spec.static_end


def kinematics(spec: PathSpec, t: NDArray) -> tuple[NDArray, NDArray]:
    """Truth velocity ``(n, 3)`` and body-to-nav DCM ``(n, 3, 3)`` at sample times."""
    curve = _PlanarCurve(spec.waypoints, spec.turn_radius)
    s, speed, _ = _distance_profile(t, spec, curve.length)
    _, hdg = curve.evaluate(s)
    v = np.zeros((len(t), 3))
    v[:, 0] = speed * np.cos(hdg)
    v[:, 1] = speed * np.sin(hdg)
    if spec.gait and spec.cadence > 0:
        # vertical bounce whose accel peak-to-peak matches the step-length rule
        step = spec.speed / spec.cadence
        amp0 = 0.5 * (step / spec.weinberg_k) ** 4
        env = speed / spec.speed
        w = 2.0 * math.pi * spec.cadence
        phase = w * (t - spec.static_start)
        v[:, 2] = (amp0 * env**4 / w) * np.sin(phase)
    C = np.stack([dcm_from_euler(spec.roll, spec.pitch, h) for h in hdg])
    return v, C


@dataclass(frozen=True)
class TraceConfig:
    imu_rate: float = 20.0
    wifi_rate: float = 0.5
    wifi_offset: float = 1.0
    with_noise: bool = True
    outlier_rate: float = 0.0
    outlier_distance: tuple[float, float] = (20.0, 30.0)
    anchors: bool = False
    anchor_sigma: float = 1.5
    mag_noise: float | None = None


def synthesize_trace(world: World, spec: PathSpec, start: ArrayLike | None = None,
                     noise: ImuNoiseModel | None = None, cfg: TraceConfig | None = None,
                     seed: int = 0, trace_id: str = "trace") -> tuple[SensorTrace, GroundTruth]:
    """Sample IMU, magnetometer, WiFi and anchor data along a path.

    ``start`` defaults to the first waypoint.  With ``cfg.with_noise`` false the
    IMU and magnetometer streams are exact and RSS carries only the deterministic
    shadowing.
    """
    cfg = cfg or TraceConfig()
    noise = noise or ImuNoiseModel()
    rng_imu = make_rng(seed, 2)
    rng_rss = make_rng(seed, 3)
    rng_anchor = make_rng(seed, 4)
    dt = 1.0 / cfg.imu_rate
    T = path_duration(spec)
    n = int(math.floor(T / dt + 1e-9)) + 1
    t = np.arange(n) * dt
    v, C = kinematics(spec, t)
    p0 = np.asarray(spec.waypoints[0] if start is None else start, dtype=float)

    p = np.zeros((n, 3))
    p[0, :2] = p0
    p[1:] = p[0] + np.cumsum(0.5 * (v[1:] + v[:-1]) * dt, axis=0)

    g_n = world.env.g
    gyro = np.zeros((n, 3))
    accel = np.zeros((n, 3))
    accel[0] = C[0].T @ (-g_n)
    rel = np.einsum("kji,kjl->kil", C[:-1], C[1:])  # C_{k-1}^T C_k
    gyro[1:] = Rotation.from_matrix(rel).as_rotvec() / dt
    a_n = (v[1:] - v[:-1]) / dt
    for k in range(1, n):
        C_mid = C[k - 1] @ rotation_vector_to_dcm(0.5 * dt * gyro[k])
        accel[k] = C_mid.T @ (a_n[k - 1] - g_n)

    m_n = world.mag(p[:, :2])
    mag = np.einsum("kji,kj->ki", C, m_n)

    if cfg.with_noise:
        bg = _gauss_markov(rng_imu, n, dt, noise.bias_gyro, noise.tau_g)
        ba = _gauss_markov(rng_imu, n, dt, noise.bias_accel, noise.tau_a)
        gyro = gyro + bg + rng_imu.normal(0.0, noise.arw / math.sqrt(dt), size=(n, 3))
        accel = accel + ba + rng_imu.normal(0.0, noise.vrw / math.sqrt(dt), size=(n, 3))
        sig_m = world.cfg.mag_noise if cfg.mag_noise is None else cfg.mag_noise
        mag = mag + rng_imu.normal(0.0, sig_m, size=(n, 3))

    rss: list[RssObservation] = []
    outlier: list[bool] = []
    rss_pos = []
    if cfg.wifi_rate > 0 and world.aps:
        every = max(1, int(round(cfg.imu_rate / cfg.wifi_rate)))
        k0 = int(round(cfg.wifi_offset * cfg.imu_rate))
        for k in range(k0, n, every):
            q = p[k, :2].copy()
            is_out = cfg.outlier_rate > 0 and rng_rss.uniform() < cfg.outlier_rate
            if is_out:
                q = _decoy(world, q, cfg.outlier_distance, rng_rss)
            obs = world.scan(q, t[k], rng_rss if cfg.with_noise else None)
            if obs.readings:
                rss.append(obs)
                outlier.append(bool(is_out))
                rss_pos.append(p[k, :2].copy())

    anchors: list[Anchor] = []
    if cfg.anchors:
        for k in (0, n - 1):
            e = rng_anchor.normal(0.0, cfg.anchor_sigma, size=2) if cfg.with_noise else np.zeros(2)
            anchors.append(Anchor(float(t[k]), (float(p[k, 0] + e[0]), float(p[k, 1] + e[1])), cfg.anchor_sigma))

    imu = ImuArrays(t, gyro, accel, mag)
    meta = {"seed": int(seed), "imu_rate": cfg.imu_rate, "wifi_rate": cfg.wifi_rate,
            "outlier_rate": cfg.outlier_rate, "noise": bool(cfg.with_noise)}
    trace = SensorTrace(trace_id, imu, rss, anchors, meta)
    truth = GroundTruth(t, p, v, C, world.true_aps(), outlier, np.array(rss_pos).reshape(-1, 2))
    return trace, truth


def _gauss_markov(rng: np.random.Generator, n: int, dt: float, sigma: float, tau: float) -> NDArray:
    phi = math.exp(-dt / tau)
    q = sigma * math.sqrt(1.0 - phi * phi)
    b = np.zeros((n, 3))
    b[0] = rng.normal(0.0, sigma, size=3)
    w = rng.normal(0.0, q, size=(n, 3))
    for k in range(1, n):
        b[k] = phi * b[k - 1] + w[k]
    return b


def _decoy(world: World, q: NDArray, dist: tuple[float, float], rng: np.random.Generator) -> NDArray:
    """A point 20-30 m (by default) from ``q`` inside the world, used for outlier scans."""
    best = q
    for _ in range(50):
        r = rng.uniform(*dist)
        a = rng.uniform(0.0, 2.0 * math.pi)
        cand = q + r * np.array([math.cos(a), math.sin(a)])
        if world.contains(cand, 0.5):
            return cand
        best = cand
    return np.clip(best, 0.0, [world.cfg.width, world.cfg.height])


def random_waypoints(world: World, rng: np.random.Generator, length: float, margin: float = 2.0,
                     min_leg: float = 6.0, max_leg: float = 25.0) -> NDArray[np.float64]:
    """Random polyline of roughly ``length`` meters inside the world.

    Legs are axis-aligned, like corridors in a building, which gives the repeated
    passes a crowdsourced database needs.
    """
    W, H = world.cfg.width, world.cfg.height
    p = np.array([rng.uniform(margin, W - margin), rng.uniform(margin, H - margin)])
    pts = [p]
    total = 0.0
    axis = int(rng.integers(2))
    while total < length:
        for _ in range(20):
            lim = (W, H)[axis]
            target = rng.uniform(margin, lim - margin)
            leg = abs(target - p[axis])
            if min_leg <= leg <= max_leg:
                break
        else:
            target = margin if p[axis] > (W, H)[axis] / 2 else (W, H)[axis] - margin
            leg = abs(target - p[axis])
        q = p.copy()
        q[axis] = target
        pts.append(q)
        total += leg
        p = q
        axis = 1 - axis
    return np.array(pts)


def random_path(world: World, seed: int, length: float = 120.0, **kw) -> PathSpec:
    rng = make_rng(seed, 5)
    return PathSpec(random_waypoints(world, rng, length), **kw)

