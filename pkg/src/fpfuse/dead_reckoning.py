"""Strapdown mechanization, pedestrian step pipeline and the 15-state error-state EKF.

The navigation frame is a flat local north-east-down plane (z down), so a level,
static device reads ``accel = (0, 0, -g)``.  The error state is ordered
``[dp(3), dv(3), psi(3), b_g(3), b_a(3)]`` where ``psi`` is the attitude error
defined by ``C_est = (I - [psi x]) C_true`` and the bias entries are residual
biases (true minus currently compensated).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.signal import find_peaks

from fpfuse import kernels
from fpfuse._pykernels import rotation_vector_to_dcm
from fpfuse.core import skew, symmetrize

log = logging.getLogger(__name__)

GRAVITY = 9.81
DEG = math.pi / 180.0
EARTH_RATE = 7.2921159e-5

# error-state slices
POS = slice(0, 3)
VEL = slice(3, 6)
ATT = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)


@dataclass
class ImuSample:
    t: float
    gyro: NDArray[np.float64]
    accel: NDArray[np.float64]
    mag: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(3)
        self.mag = np.asarray(self.mag, dtype=float).reshape(3)

    def is_finite(self) -> bool:
        return bool(
            math.isfinite(self.t)
            and np.all(np.isfinite(self.gyro))
            and np.all(np.isfinite(self.accel))
            and np.all(np.isfinite(self.mag))
        )


@dataclass
class NavState:
    """Full navigation state: position, velocity, body-to-nav DCM and sensor biases."""

    p_n: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    v_n: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    C_bn: NDArray[np.float64] = field(default_factory=lambda: np.eye(3))
    b_g: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    b_a: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.p_n = np.array(self.p_n, dtype=float).reshape(3)
        self.v_n = np.array(self.v_n, dtype=float).reshape(3)
        self.C_bn = np.ascontiguousarray(np.array(self.C_bn, dtype=float).reshape(3, 3))
        self.b_g = np.array(self.b_g, dtype=float).reshape(3)
        self.b_a = np.array(self.b_a, dtype=float).reshape(3)

    def copy(self) -> "NavState":
        return NavState(self.p_n.copy(), self.v_n.copy(), self.C_bn.copy(), self.b_g.copy(), self.b_a.copy())

    @property
    def euler(self) -> tuple[float, float, float]:
        return euler_from_dcm(self.C_bn)

    @property
    def heading(self) -> float:
        return self.euler[2]


@dataclass
class ErrorState:
    dp_n: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    dv_n: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    psi: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    b_g: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    b_a: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def as_vector(self) -> NDArray[np.float64]:
        return np.concatenate([self.dp_n, self.dv_n, self.psi, self.b_g, self.b_a]).astype(float)

    @classmethod
    def from_vector(cls, x: ArrayLike) -> "ErrorState":
        x = np.asarray(x, dtype=float).reshape(15)
        return cls(x[POS].copy(), x[VEL].copy(), x[ATT].copy(), x[BG].copy(), x[BA].copy())


@dataclass(frozen=True)
class ImuNoiseModel:
    """White-noise densities and first-order Gauss-Markov bias parameters.

    ``arw`` in rad/sqrt(s), ``vrw`` in m/s/sqrt(s), bias instabilities ``bias_gyro``
    (rad/s) and ``bias_accel`` (m/s^2) are the steady-state bias standard deviations
    with correlation times ``tau_g`` / ``tau_a`` (s).
    """

    arw: float = 0.6 * DEG / 60.0
    vrw: float = 0.18 / 60.0
    bias_gyro: float = 0.05 * DEG
    bias_accel: float = 0.01
    tau_g: float = 300.0
    tau_a: float = 300.0

    def __post_init__(self):
        for name in ("arw", "vrw", "bias_gyro", "bias_accel", "tau_g", "tau_a"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ImuNoiseModel.{name} must be strictly positive")

    @property
    def gyro_bias_driving(self) -> float:
        """Driving-noise density of the gyro bias process, rad/s/sqrt(s)."""
        return math.sqrt(2.0 * self.bias_gyro**2 / self.tau_g)

    @property
    def accel_bias_driving(self) -> float:
        return math.sqrt(2.0 * self.bias_accel**2 / self.tau_a)

    def qdiag(self) -> NDArray[np.float64]:
        """Diagonal of the continuous process-noise density for the 15 error states."""
        return np.concatenate(
            [
                np.zeros(3),
                np.full(3, self.vrw**2),
                np.full(3, self.arw**2),
                np.full(3, self.gyro_bias_driving**2),
                np.full(3, self.accel_bias_driving**2),
            ]
        )


@dataclass(frozen=True)
class EnvironmentReference:
    g_n: tuple[float, float, float] = (0.0, 0.0, GRAVITY)
    m_n: tuple[float, float, float] = (0.16, 0.0, 0.52)

    def __post_init__(self):
        g = float(np.linalg.norm(self.g_n))
        if not 9.7 <= g <= 9.9:
            raise ValueError(f"local gravity magnitude {g:.3f} outside [9.7, 9.9] m/s^2")

    @property
    def g(self) -> NDArray[np.float64]:
        return np.asarray(self.g_n, dtype=float)

    @property
    def m(self) -> NDArray[np.float64]:
        return np.asarray(self.m_n, dtype=float)


@dataclass(frozen=True)
class StepEvent:
    t_prev: float
    t: float
    length: float
    heading: float = float("nan")
    index: int = -1

    def __post_init__(self):
        if not self.t > self.t_prev:
            raise ValueError("step end time must be after its start time")


@dataclass(frozen=True)
class StepDetectorConfig:
    prominence: float = 0.5
    refractory_s: float = 0.3
    smooth_window: int = 2
    weinberg_k: float = 0.4
    min_length: float = 0.2
    max_length: float = 1.2
    max_step_period: float = 2.0


@dataclass(frozen=True)
class DrConfig:
    """Measurement noises, initial uncertainties, gates and detector settings."""

    sigma_f: float = 2.0  # m/s^2
    sigma_m: float = 0.03  # Gauss
    sigma_v: float = 0.3  # m/s
    sigma_w: float = 0.1 * DEG  # rad/s
    p0_pos: tuple[float, float, float] = (20.0, 20.0, 20.0)
    p0_vel: tuple[float, float, float] = (1.0, 1.0, 1.0)
    p0_att: tuple[float, float, float] = (10 * DEG, 10 * DEG, 90 * DEG)
    p0_bg: tuple[float, float, float] = (1 * DEG, 1 * DEG, 1 * DEG)
    p0_ba: tuple[float, float, float] = (0.1, 0.1, 0.1)
    gravity_gate: float = 0.5  # m/s^2 around |g|
    mag_gate: float = 0.3  # relative deviation of |m|
    attitude_update_interval: float = 0.5  # s
    use_gravity_update: bool = True
    use_mag_update: bool = True
    static_window_s: float = 0.5
    static_accel_std: float = 0.3
    static_gyro_mean: float = 3.0 * DEG
    use_zupt: bool = True
    use_pdr: bool = True
    earth_rate: bool = False
    latitude_deg: float = 51.08
    steps: StepDetectorConfig = field(default_factory=StepDetectorConfig)

    def p0(self) -> NDArray[np.float64]:
        sig = np.concatenate([self.p0_pos, self.p0_vel, self.p0_att, self.p0_bg, self.p0_ba])
        return np.diag(np.asarray(sig, dtype=float) ** 2)

    def earth_rate_n(self) -> NDArray[np.float64]:
        lat = self.latitude_deg * DEG
        return np.array([EARTH_RATE * math.cos(lat), 0.0, -EARTH_RATE * math.sin(lat)])


# ---------------------------------------------------------------------------
# attitude helpers


def dcm_from_euler(roll: float, pitch: float, yaw: float) -> NDArray[np.float64]:
    """Body-to-nav DCM for ZYX Euler angles."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def euler_from_dcm(C: NDArray) -> tuple[float, float, float]:
    roll = math.atan2(C[2, 1], C[2, 2])
    pitch = -math.asin(max(-1.0, min(1.0, C[2, 0])))
    yaw = math.atan2(C[1, 0], C[0, 0])
    return roll, pitch, yaw


def wrap_angle(a):
    return (np.asarray(a) + math.pi) % (2.0 * math.pi) - math.pi


def orthonormalize(C: NDArray) -> NDArray[np.float64]:
    U, _, Vt = np.linalg.svd(C)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def initial_attitude(accel: ArrayLike, mag: ArrayLike, env: EnvironmentReference) -> NDArray[np.float64]:
    """Roll/pitch from a static specific-force vector, heading from the leveled field."""
    fx, fy, fz = np.asarray(accel, dtype=float)
    roll = math.atan2(-fy, -fz)
    pitch = math.atan2(fx, math.hypot(fy, fz))
    m_l = dcm_from_euler(roll, pitch, 0.0) @ np.asarray(mag, dtype=float)
    decl = math.atan2(env.m_n[1], env.m_n[0])
    yaw = decl - math.atan2(m_l[1], m_l[0])
    return dcm_from_euler(roll, pitch, float(wrap_angle(yaw)))


# ---------------------------------------------------------------------------
# mechanization and error propagation


def mechanize(
    state: NavState,
    sample: ImuSample,
    dt: float,
    env: EnvironmentReference | None = None,
    earth_rate_n: ArrayLike | None = None,
) -> NavState:
    """Advance the navigation state over one IMU interval of length ``dt``.

    The sample's rates are held over ``[t - dt, t]``; attitude is integrated with the
    exact rotation for the bias-corrected rate, velocity with the mid-interval
    attitude, position with the trapezoid rule.
    """
    if not (0.0 < dt <= 0.5):
        raise ValueError(f"dt must be in (0, 0.5] s, got {dt}")
    if not sample.is_finite():
        raise ValueError("non-finite IMU sample")
    env = env or EnvironmentReference()
    out = state.copy()
    P = np.zeros((15, 15))
    gyro = np.ascontiguousarray(np.vstack([np.zeros(3), sample.gyro]))
    accel = np.ascontiguousarray(np.vstack([np.zeros(3), sample.accel]))
    t = np.array([0.0, dt])
    w_ie = np.zeros(3) if earth_rate_n is None else np.asarray(earth_rate_n, dtype=float)
    pos = np.zeros((2, 3))
    pvar = np.zeros((2, 3))
    kernels.ins_span(out.p_n, out.v_n, out.C_bn, out.b_g, out.b_a, P, gyro, accel, t, 1, 2,
                     env.g, w_ie, 1.0, 1.0, np.zeros(15), pos, pvar, earth_rate_n is not None)
    return out


def error_dynamics(state: NavState, f_b: ArrayLike, noise: ImuNoiseModel,
                   earth_rate_n: ArrayLike | None = None) -> NDArray[np.float64]:
    """Continuous-time error-state Jacobian ``F`` (15x15)."""
    C = state.C_bn
    f_n = C @ (np.asarray(f_b, dtype=float) - state.b_a)
    F = np.zeros((15, 15))
    F[POS, VEL] = np.eye(3)
    F[VEL, ATT] = skew(f_n)
    F[VEL, BA] = C
    F[ATT, BG] = -C
    F[BG, BG] = -np.eye(3) / noise.tau_g
    F[BA, BA] = -np.eye(3) / noise.tau_a
    if earth_rate_n is not None:
        W = skew(earth_rate_n)
        F[VEL, VEL] = -2.0 * W
        F[ATT, ATT] = -W
    return F


def propagate_error(
    err: ErrorState,
    P: NDArray,
    state: NavState,
    sample: ImuSample,
    noise: ImuNoiseModel,
    dt: float,
    earth_rate_n: ArrayLike | None = None,
) -> tuple[ErrorState, NDArray[np.float64], bool]:
    """First-order discrete propagation ``Phi = I + F dt``, ``P <- Phi P Phi^T + Q dt``.

    Returns the propagated error state, covariance and a flag that is set when the
    input covariance had to be re-symmetrized.
    """
    P, flagged = symmetrize(np.asarray(P, dtype=float))
    if flagged:
        log.warning("covariance asymmetry above 1e-9 before propagation; re-symmetrized")
    F = error_dynamics(state, sample.accel, noise, earth_rate_n)
    Phi = np.eye(15) + F * dt
    x = Phi @ err.as_vector()
    P = Phi @ P @ Phi.T + np.diag(noise.qdiag() * dt)
    P, _ = symmetrize(P)
    return ErrorState.from_vector(x), P, flagged


# ---------------------------------------------------------------------------
# measurement updates


def apply_correction(state: NavState, dx: NDArray) -> None:
    """Closed-loop feedback of an error-state estimate into ``state`` (in place)."""
    state.p_n -= dx[POS]
    state.v_n -= dx[VEL]
    state.C_bn[:, :] = rotation_vector_to_dcm(dx[ATT]) @ state.C_bn
    state.b_g += dx[BG]
    state.b_a += dx[BA]


def ekf_update(state: NavState, P: NDArray, H: NDArray, R: NDArray, z: NDArray) -> NDArray:
    """Joseph-form update on a zero error state followed by feedback (in place)."""
    dx = kernels.kf_update(P, np.ascontiguousarray(H), np.ascontiguousarray(R), np.ascontiguousarray(z))
    apply_correction(state, dx)
    return dx


def _prepare(state, P, inplace):
    if inplace:
        return state, P
    return state.copy(), np.array(P, dtype=float, order="C", copy=True)


def is_quasi_static(accel: ArrayLike, env: EnvironmentReference, gate: float) -> bool:
    return abs(float(np.linalg.norm(accel)) - float(np.linalg.norm(env.g))) <= gate


def update_gravity(state: NavState, P: NDArray, sample: ImuSample, env: EnvironmentReference | None = None,
                   cfg: DrConfig | None = None, inplace: bool = False):
    """Accelerometer-as-gravity update on the attitude error.

    Innovation ``C f_b + g_n`` with ``H_psi = -[g_n x]``.  Skipped (``applied=False``)
    when the specific-force magnitude is outside ``|g| +/- gravity_gate``.
    """
    env = env or EnvironmentReference()
    cfg = cfg or DrConfig()
    state, P = _prepare(state, P, inplace)
    if not is_quasi_static(sample.accel, env, cfg.gravity_gate):
        return state, P, False
    z = state.C_bn @ (sample.accel - state.b_a) + env.g
    H = np.zeros((3, 15))
    H[:, ATT] = -skew(env.g)
    R = np.eye(3) * cfg.sigma_f**2
    ekf_update(state, P, H, R, z)
    return state, P, True


def update_magnetometer(state: NavState, P: NDArray, sample: ImuSample, env: EnvironmentReference | None = None,
                        cfg: DrConfig | None = None, inplace: bool = False):
    """Magnetometer update, magnitude-gated.

    Innovation ``m_n - C m_b`` which equals ``-[m_n x] psi`` to first order, hence
    ``H_psi = -[m_n x]``.
    """
    env = env or EnvironmentReference()
    cfg = cfg or DrConfig()
    state, P = _prepare(state, P, inplace)
    ref = float(np.linalg.norm(env.m))
    if abs(float(np.linalg.norm(sample.mag)) - ref) > cfg.mag_gate * ref:
        return state, P, False
    z = env.m - state.C_bn @ sample.mag
    H = np.zeros((3, 15))
    H[:, ATT] = -skew(env.m)
    R = np.eye(3) * cfg.sigma_m**2
    ekf_update(state, P, H, R, z)
    return state, P, True


def update_motion(state: NavState, P: NDArray, v_meas: ArrayLike | str, gyro: ArrayLike | None = None,
                  cfg: DrConfig | None = None, inplace: bool = False):
    """Body-frame velocity update, ZUPT or ZARU.

    ``v_meas`` is a body-frame velocity (e.g. from :func:`pdr_velocity`), ``"zupt"``
    for zero velocity, or ``"zaru"`` for a zero angular-rate update using ``gyro``.
    """
    cfg = cfg or DrConfig()
    state, P = _prepare(state, P, inplace)
    C = state.C_bn
    if isinstance(v_meas, str) and v_meas == "zaru":
        if gyro is None:
            raise ValueError("ZARU needs the gyro reading")
        z = np.asarray(gyro, dtype=float) - state.b_g
        H = np.zeros((3, 15))
        H[:, BG] = np.eye(3)
        R = np.eye(3) * cfg.sigma_w**2
    else:
        v_b = np.zeros(3) if isinstance(v_meas, str) else np.asarray(v_meas, dtype=float)
        if isinstance(v_meas, str) and v_meas != "zupt":
            raise ValueError(f"unknown motion update {v_meas!r}")
        z = C.T @ state.v_n - v_b
        H = np.zeros((3, 15))
        H[:, VEL] = C.T
        H[:, ATT] = -C.T @ skew(state.v_n)
        R = np.eye(3) * cfg.sigma_v**2
    ekf_update(state, P, H, R, z)
    return state, P, True


# ---------------------------------------------------------------------------
# steps


def pdr_velocity(step: StepEvent) -> NDArray[np.float64]:
    """Body-frame velocity ``[s / (t_k - t_{k-1}), 0, 0]`` implied by one step."""
    dt = step.t - step.t_prev
    if dt <= 0:
        raise ValueError("step duration must be positive")
    return np.array([step.length / dt, 0.0, 0.0])


def _refine_extremum(y: NDArray, i: int) -> float:
    """Parabolic refinement of a sampled extremum at index ``i``."""
    if i <= 0 or i >= len(y) - 1:
        return float(y[i])
    a, b, c = y[i - 1], y[i], y[i + 1]
    den = a - 2.0 * b + c
    if den == 0.0:
        return float(b)
    return float(b - 0.125 * (a - c) ** 2 / den)


def detect_steps(t: ArrayLike, accel: ArrayLike, cfg: StepDetectorConfig | None = None) -> list[StepEvent]:
    """Peak-based step detection on the acceleration magnitude.

    Peaks are found on a short moving average of ``|accel|`` with a refractory
    window and a prominence threshold.  Each peak after the first closes a step
    starting at the previous peak; a gap above ``max_step_period`` restarts the
    walk.  Step length is ``K * (a_max - a_min) ** 0.25`` with the extremes taken on
    the raw magnitude over the step and refined parabolically.
    """
    cfg = cfg or StepDetectorConfig()
    t = np.asarray(t, dtype=float)
    a = np.asarray(accel, dtype=float)
    if len(t) < 3:
        return []
    fs = 1.0 / float(np.median(np.diff(t)))
    mag = np.linalg.norm(a, axis=1)
    w = max(1, int(cfg.smooth_window))
    kernel = np.ones(w) / w
    smooth = np.convolve(mag, kernel, mode="full")[: len(mag)]
    smooth[: w - 1] = mag[: w - 1]
    distance = max(1, int(math.ceil(cfg.refractory_s * fs)))
    peaks, _ = find_peaks(smooth, distance=distance, prominence=cfg.prominence)
    steps: list[StepEvent] = []
    prev = None
    for pk in peaks:
        # the filter delays the peak by (w-1)/2 samples; search the raw peak nearby
        lo = max(0, pk - w)
        hi = min(len(mag), pk + 2)
        ip = lo + int(np.argmax(mag[lo:hi]))
        if prev is not None and t[ip] - t[prev] <= cfg.max_step_period:
            seg = mag[prev : ip + 1]
            it = prev + int(np.argmin(seg))
            a_max = _refine_extremum(mag, ip)
            a_min = _refine_extremum(mag, it)
            amp = max(a_max - a_min, 0.0)
            length = cfg.weinberg_k * amp**0.25
            length = min(max(length, cfg.min_length), cfg.max_length)
            cadence = 1.0 / (t[ip] - t[prev])
            if 0.5 <= cadence <= 3.0:
                steps.append(StepEvent(t_prev=float(t[prev]), t=float(t[ip]), length=float(length), index=int(ip)))
        prev = ip
    return steps


def static_flags(t: ArrayLike, accel: ArrayLike, gyro: ArrayLike, cfg: DrConfig | None = None) -> NDArray[np.bool_]:
    """Trailing-window static detector on accel-magnitude std and gyro-magnitude mean."""
    cfg = cfg or DrConfig()
    t = np.asarray(t, dtype=float)
    am = np.linalg.norm(np.asarray(accel, dtype=float), axis=1)
    gm = np.linalg.norm(np.asarray(gyro, dtype=float), axis=1)
    n = len(t)
    if n == 0:
        return np.zeros(0, dtype=bool)
    fs = 1.0 / float(np.median(np.diff(t))) if n > 1 else 20.0
    w = max(2, int(round(cfg.static_window_s * fs)))
    c1 = np.concatenate([[0.0], np.cumsum(am)])
    c2 = np.concatenate([[0.0], np.cumsum(am * am)])
    cg = np.concatenate([[0.0], np.cumsum(gm)])
    idx = np.arange(n)
    lo = np.maximum(0, idx - w + 1)
    cnt = idx - lo + 1
    mean = (c1[idx + 1] - c1[lo]) / cnt
    var = np.maximum((c2[idx + 1] - c2[lo]) / cnt - mean * mean, 0.0)
    gmean = (cg[idx + 1] - cg[lo]) / cnt
    flags = (np.sqrt(var) < cfg.static_accel_std) & (gmean < cfg.static_gyro_mean)
    flags[: w - 1] = flags[: w - 1] & (cnt[: w - 1] >= w)
    return flags


# ---------------------------------------------------------------------------
# engine


@dataclass
class ImuArrays:
    """Column-wise IMU stream (row ``k`` is the sample at ``t[k]``)."""

    t: NDArray[np.float64]
    gyro: NDArray[np.float64]
    accel: NDArray[np.float64]
    mag: NDArray[np.float64]

    def __post_init__(self):
        self.t = np.ascontiguousarray(self.t, dtype=float)
        self.gyro = np.ascontiguousarray(self.gyro, dtype=float)
        self.accel = np.ascontiguousarray(self.accel, dtype=float)
        self.mag = np.ascontiguousarray(self.mag, dtype=float)
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def sample(self, k: int) -> ImuSample:
        return ImuSample(float(self.t[k]), self.gyro[k], self.accel[k], self.mag[k])

    def reversed(self) -> "ImuArrays":
        """Time-reversed stream for backward dead reckoning.

        Timestamps become ``t_end - t`` (ascending) and gyro rates are negated;
        specific force and field are unchanged.
        """
        t = self.t[-1] - self.t[::-1]
        return ImuArrays(t, -self.gyro[::-1].copy(), self.accel[::-1].copy(), self.mag[::-1].copy())

    def index_of(self, t: float) -> int:
        k = int(np.searchsorted(self.t, t))
        if k >= len(self.t):
            return len(self.t) - 1
        if k > 0 and abs(self.t[k - 1] - t) <= abs(self.t[k] - t):
            return k - 1
        return k


@dataclass
class DrResult:
    t: NDArray[np.float64]
    pos: NDArray[np.float64]
    pos_var: NDArray[np.float64]
    attitude: dict[int, NDArray[np.float64]]
    steps: list[StepEvent]
    state: NavState
    P: NDArray[np.float64]
    counts: dict[str, int]
    start: int = 0

    def horizontal_sigma(self) -> NDArray[np.float64]:
        """Per-epoch horizontal position accuracy sqrt((var_n + var_e) / 2)."""
        return np.sqrt(0.5 * (self.pos_var[:, 0] + self.pos_var[:, 1]))


class DrEngine:
    """Event-driven error-state EKF over one IMU stream.

    Between events the compiled (or fallback) span kernel mechanizes and propagates
    the covariance sample by sample.  Events are static-period ZUPT/ZARU pairs,
    periodic gravity/magnetometer attitude updates and PDR step velocity updates.
    External callers (the fusion filter) interleave their own updates through
    :meth:`advance_to` and direct access to ``state`` / ``P``.
    """

    def __init__(self, imu: ImuArrays, env: EnvironmentReference | None = None,
                 noise: ImuNoiseModel | None = None, cfg: DrConfig | None = None,
                 steps: list[StepEvent] | None = None, velocity_sign: float = 1.0,
                 record: ArrayLike | None = None):
        self.imu = imu
        self.env = env or EnvironmentReference()
        self.noise = noise or ImuNoiseModel()
        self.cfg = cfg or DrConfig()
        self.velocity_sign = velocity_sign
        n = len(imu)
        self.pos = np.full((n, 3), np.nan)
        self.pos_var = np.full((n, 3), np.nan)
        self.attitude: dict[int, NDArray] = {}
        self.counts = {"zupt": 0, "gravity": 0, "gravity_skipped": 0, "mag": 0, "mag_skipped": 0, "pdr": 0}
        self._qdiag = self.noise.qdiag()
        self._w_ie = self.cfg.earth_rate_n() if self.cfg.earth_rate else np.zeros(3)
        if steps is None and self.cfg.use_pdr:
            steps = detect_steps(imu.t, imu.accel, self.cfg.steps)
        self.steps = list(steps or [])
        self._static = static_flags(imu.t, imu.accel, imu.gyro, self.cfg) if self.cfg.use_zupt else np.zeros(n, bool)
        self._record = set(int(k) for k in (record if record is not None else []))
        self.state: NavState | None = None
        self.P: NDArray | None = None
        self.k = -1
        self.start = 0
        self._events: dict[int, list] = {}

    # -- setup -------------------------------------------------------------
    def initialize(self, k0: int, state: NavState | None = None, P: NDArray | None = None,
                   p_n: ArrayLike | None = None) -> None:
        """Start the filter at sample ``k0``.

        Without an explicit state, attitude comes from the mean accel/mag over the
        preceding static window and velocity is zero.
        """
        imu = self.imu
        if state is None:
            fs = 1.0 / float(np.median(np.diff(imu.t[: min(len(imu), 200)])))
            w = max(1, int(round(self.cfg.static_window_s * fs)))
            lo = max(0, k0 - w + 1)
            C = initial_attitude(imu.accel[lo : k0 + 1].mean(axis=0), imu.mag[lo : k0 + 1].mean(axis=0), self.env)
            state = NavState(p_n=np.zeros(3) if p_n is None else p_n, C_bn=C)
        self.state = state.copy()
        self.P = np.ascontiguousarray(self.cfg.p0() if P is None else np.array(P, dtype=float))
        self.k = k0
        self.start = k0
        self.pos[k0] = self.state.p_n
        self.pos_var[k0] = np.diag(self.P)[:3]
        self._build_events(k0)

    def _build_events(self, k0: int) -> None:
        ev: dict[int, list] = {}
        n = len(self.imu)
        t = self.imu.t
        if self.cfg.use_zupt:
            for k in np.flatnonzero(self._static[k0 + 1 :]) + k0 + 1:
                ev.setdefault(int(k), []).append(("static", None))
        if self.cfg.use_gravity_update or self.cfg.use_mag_update:
            nxt = t[k0] + self.cfg.attitude_update_interval
            for k in range(k0 + 1, n):
                if t[k] >= nxt - 1e-9:
                    ev.setdefault(k, []).append(("attitude", None))
                    nxt += self.cfg.attitude_update_interval
        if self.cfg.use_pdr:
            for s in self.steps:
                k = s.index if s.index >= 0 else self.imu.index_of(s.t)
                if k > k0 and t[k] - s.t_prev > 0:
                    ev.setdefault(int(k), []).append(("step", s))
        for k in self._record:
            if k > k0:
                ev.setdefault(k, []).append(("record", None))
        self._events = ev
        self._event_keys = sorted(ev)
        self._ei = 0

    # -- running -----------------------------------------------------------
    def _span(self, k_end: int) -> None:
        """Mechanize samples ``self.k + 1 .. k_end`` inclusive."""
        if k_end <= self.k:
            return
        s = self.state
        kernels.ins_span(s.p_n, s.v_n, s.C_bn, s.b_g, s.b_a, self.P, self.imu.gyro, self.imu.accel, self.imu.t,
                         self.k + 1, k_end + 1, self.env.g, self._w_ie, self.noise.tau_g, self.noise.tau_a,
                         self._qdiag, self.pos, self.pos_var, self.cfg.earth_rate)
        self.k = k_end

    def _handle(self, k: int, kind: str, payload) -> None:
        s, P, cfg = self.state, self.P, self.cfg
        sample = None
        if kind == "static":
            sample = self.imu.sample(k)
            z = np.concatenate([s.C_bn.T @ s.v_n, sample.gyro - s.b_g])
            H = np.zeros((6, 15))
            H[0:3, VEL] = s.C_bn.T
            H[0:3, ATT] = -s.C_bn.T @ skew(s.v_n)
            H[3:6, BG] = np.eye(3)
            R = np.diag([cfg.sigma_v**2] * 3 + [cfg.sigma_w**2] * 3)
            ekf_update(s, P, H, R, z)
            self.counts["zupt"] += 1
        elif kind == "attitude":
            sample = self.imu.sample(k)
            if cfg.use_gravity_update:
                _, _, ok = update_gravity(s, P, sample, self.env, cfg, inplace=True)
                self.counts["gravity" if ok else "gravity_skipped"] += 1
            if cfg.use_mag_update:
                _, _, ok = update_magnetometer(s, P, sample, self.env, cfg, inplace=True)
                self.counts["mag" if ok else "mag_skipped"] += 1
        elif kind == "step":
            step: StepEvent = payload
            v_b = self.velocity_sign * pdr_velocity(step)
            update_motion(s, P, v_b, cfg=cfg, inplace=True)
            self.counts["pdr"] += 1
        self.attitude[k] = s.C_bn.copy()

    def advance_to(self, k_target: int) -> None:
        """Process all samples and internal events up to and including ``k_target``."""
        k_target = min(int(k_target), len(self.imu) - 1)
        keys = self._event_keys
        while self._ei < len(keys) and keys[self._ei] <= k_target:
            k = keys[self._ei]
            self._ei += 1
            if k <= self.k:
                continue
            self._span(k)
            for kind, payload in self._events[k]:
                self._handle(k, kind, payload)
            self.pos[k] = self.state.p_n
            self.pos_var[k] = np.diag(self.P)[:3]
        self._span(k_target)

    def mark(self) -> None:
        """Refresh the stored history at the current sample after an external update."""
        self.pos[self.k] = self.state.p_n
        self.pos_var[self.k] = np.diag(self.P)[:3]
        self.attitude[self.k] = self.state.C_bn.copy()

    def result(self) -> DrResult:
        steps = []
        for s in self.steps:
            k = s.index if s.index >= 0 else self.imu.index_of(s.t)
            C = self.attitude.get(k)
            heading = euler_from_dcm(C)[2] if C is not None else float("nan")
            steps.append(replace(s, heading=heading, index=k))
        return DrResult(self.imu.t, self.pos, self.pos_var, self.attitude, steps, self.state.copy(), self.P.copy(),
                        dict(self.counts), self.start)

    def run(self, k0: int = 0, state: NavState | None = None, P: NDArray | None = None,
            p_n: ArrayLike | None = None) -> DrResult:
        self.initialize(k0, state, P, p_n)
        self.advance_to(len(self.imu) - 1)
        return self.result()


def run_dead_reckoning(imu: ImuArrays, p0: ArrayLike, env: EnvironmentReference | None = None,
                       noise: ImuNoiseModel | None = None, cfg: DrConfig | None = None,
                       backward: bool = False, p0_sigma: float | None = None,
                       record: ArrayLike | None = None) -> DrResult:
    """Forward or backward DR from a known start position.

    In backward mode the stream is time-reversed, PDR velocities are negated and
    the returned histories are flipped back onto the original sample order.
    """
    cfg = cfg or DrConfig()
    if p0_sigma is not None:
        cfg = replace(cfg, p0_pos=(p0_sigma, p0_sigma, p0_sigma))
    n = len(imu)
    if backward:
        rid = None if record is None else [n - 1 - int(k) for k in record]
        eng = DrEngine(imu.reversed(), env, noise, cfg, velocity_sign=-1.0, record=rid)
        pos0 = np.zeros(3) if p0 is None else np.asarray(p0, dtype=float)
        res = eng.run(0, p_n=np.append(pos0[:2], pos0[2] if pos0.size > 2 else 0.0))
        att = {n - 1 - k: C for k, C in res.attitude.items()}
        steps = [replace(s, t_prev=imu.t[-1] - s.t, t=imu.t[-1] - s.t_prev, index=n - 1 - s.index)
                 for s in res.steps][::-1]
        return DrResult(imu.t, res.pos[::-1].copy(), res.pos_var[::-1].copy(), att, steps, res.state, res.P,
                        res.counts, n - 1)
    eng = DrEngine(imu, env, noise, cfg, record=record)
    pos0 = np.zeros(3) if p0 is None else np.asarray(p0, dtype=float)
    return eng.run(0, p_n=np.append(pos0[:2], pos0[2] if pos0.size > 2 else 0.0))
