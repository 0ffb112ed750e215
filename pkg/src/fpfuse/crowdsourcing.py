"""Selection of reliable crowdsourced walks and forward-backward smoothing of their DR."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from fpfuse.dead_reckoning import (
    DrConfig,
    DrResult,
    EnvironmentReference,
    ImuArrays,
    ImuNoiseModel,
    run_dead_reckoning,
)


@dataclass(frozen=True)
class Anchor:
    """An absolute position fix (e.g. outdoor GNSS) bounding a crowdsourced segment."""

    t: float
    p: tuple[float, float]
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("anchor sigma must be positive")


@dataclass
class Track:
    """A 2-D trajectory with per-epoch, per-axis standard deviations."""

    t: NDArray[np.float64]
    p: NDArray[np.float64]
    sigma: NDArray[np.float64]

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).ravel()
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 2)
        s = np.asarray(self.sigma, dtype=float)
        self.sigma = np.broadcast_to(s.reshape(-1, 1) if s.ndim == 1 else s, self.p.shape).astype(float)

    @classmethod
    def from_dr(cls, res: DrResult, idx: ArrayLike | None = None) -> "Track":
        idx = np.arange(len(res.t)) if idx is None else np.asarray(idx, dtype=int)
        return cls(res.t[idx], res.pos[idx, :2], np.sqrt(res.pos_var[idx, :2]))


@dataclass
class SmoothedTrack:
    """Smoothed trajectory: position, scalar accuracy and the per-axis forward weight."""

    t: NDArray[np.float64]
    p_sm: NDArray[np.float64]
    sigma_sm: NDArray[np.float64]
    xi: NDArray[np.float64]
    sigma_axes: NDArray[np.float64] = field(default=None)

    def __len__(self):
        return len(self.t)

    def at(self, t: float, tol: float = 0.1) -> int | None:
        """Index of the epoch nearest ``t`` if within ``tol`` seconds."""
        k = int(np.searchsorted(self.t, t))
        best = None
        for j in (k - 1, k):
            if 0 <= j < len(self.t) and abs(self.t[j] - t) <= tol:
                if best is None or abs(self.t[j] - t) < abs(self.t[best] - t):
                    best = j
        return best


def align(fwd: Track, bwd: Track, tol: float = 0.1) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    """Pair each forward epoch with the nearest backward epoch within ``tol``."""
    j = np.searchsorted(bwd.t, fwd.t)
    j0 = np.clip(j - 1, 0, len(bwd.t) - 1)
    j1 = np.clip(j, 0, len(bwd.t) - 1)
    pick = np.where(np.abs(bwd.t[j0] - fwd.t) <= np.abs(bwd.t[j1] - fwd.t), j0, j1)
    ok = np.abs(bwd.t[pick] - fwd.t) <= tol
    return np.flatnonzero(ok), pick[ok]


def smooth(fwd: Track, bwd: Track, tol: float = 0.1) -> SmoothedTrack:
    """Combine forward and backward solutions with inverse-variance weights.

    Per axis ``xi = u+ / (u+ + u-)`` with ``u = 1 / sigma^2``,
    ``x_sm = xi x+ + (1 - xi) x-`` and
    ``sigma_sm = sqrt(xi^2 sigma+^2 + (1 - xi)^2 sigma-^2)``.  The scalar
    ``sigma_sm`` is the RMS of the two axes.  Epochs without a backward partner
    within ``tol`` seconds are dropped.
    """
    i, j = align(fwd, bwd, tol)
    sp, sm = fwd.sigma[i], bwd.sigma[j]
    with np.errstate(divide="ignore"):
        up = np.where(sp > 0, 1.0 / sp**2, np.inf)
        um = np.where(sm > 0, 1.0 / sm**2, np.inf)
    both_inf = np.isinf(up) & np.isinf(um)
    if np.any(both_inf):
        up = np.where(both_inf, 1.0, up)
        um = np.where(both_inf, 1.0, um)
    total = up + um
    if np.any(total == 0) or not np.all(np.isfinite(sp)) or not np.all(np.isfinite(sm)):
        raise ValueError("forward and backward weights sum to zero")
    with np.errstate(invalid="ignore"):
        xi = np.where(np.isinf(up), 1.0, np.where(np.isinf(um), 0.0, up / total))
    p = xi * fwd.p[i] + (1.0 - xi) * bwd.p[j]
    sig_axes = np.sqrt(xi**2 * sp**2 + (1.0 - xi) ** 2 * sm**2)
    sigma = np.sqrt(np.mean(sig_axes**2, axis=1))
    return SmoothedTrack(fwd.t[i], p, sigma, xi, sig_axes)


def smooth_weighted(x_fwd, s_fwd, x_bwd, s_bwd, xi):
    """Single-epoch smoothing with an explicit forward weight ``xi``."""
    xi = float(xi)
    if not 0.0 <= xi <= 1.0:
        raise ValueError("xi must lie in [0, 1]")
    x = xi * np.asarray(x_fwd, dtype=float) + (1.0 - xi) * np.asarray(x_bwd, dtype=float)
    s = np.sqrt(xi**2 * np.asarray(s_fwd, dtype=float) ** 2 + (1.0 - xi) ** 2 * np.asarray(s_bwd, dtype=float) ** 2)
    return x, s


@dataclass
class SegmentCandidate:
    """A crowdsourced walk with its bounding anchors and DR end-point checks."""

    trace_id: str
    start: Anchor | None
    end: Anchor | None
    forward: DrResult | None = None
    backward: DrResult | None = None
    forward_end: NDArray | None = None
    backward_end: NDArray | None = None

    def end_errors(self) -> tuple[float, float]:
        """(forward DR error at the end anchor, backward DR error at the start anchor)."""
        if self.start is None or self.end is None or self.forward_end is None or self.backward_end is None:
            return float("inf"), float("inf")
        ef = float(np.linalg.norm(np.asarray(self.forward_end)[:2] - np.asarray(self.end.p)))
        eb = float(np.linalg.norm(np.asarray(self.backward_end)[:2] - np.asarray(self.start.p)))
        return ef, eb


def select_segments(candidates: list[SegmentCandidate], lambda_d: float = 20.0) -> list[SegmentCandidate]:
    """Keep anchor-bounded segments whose forward and backward end errors are <= ``lambda_d``."""
    if not lambda_d > 0:
        raise ValueError("lambda_d must be positive")
    out = []
    for c in candidates:
        ef, eb = c.end_errors()
        if ef <= lambda_d and eb <= lambda_d:
            out.append(c)
    return out


def dead_reckon_segment(trace_id: str, imu: ImuArrays, anchors: list[Anchor],
                        env: EnvironmentReference | None = None, noise: ImuNoiseModel | None = None,
                        cfg: DrConfig | None = None, record=None) -> SegmentCandidate:
    """Run forward DR from the first anchor and backward DR from the last one.

    Anchors must lie within one second of the trace start and end; otherwise the
    candidate is returned without DR results and is rejected by selection.
    """
    t0, t1 = float(imu.t[0]), float(imu.t[-1])
    start = min((a for a in anchors if abs(a.t - t0) <= 1.0), key=lambda a: abs(a.t - t0), default=None)
    end = min((a for a in anchors if abs(a.t - t1) <= 1.0), key=lambda a: abs(a.t - t1), default=None)
    cand = SegmentCandidate(trace_id, start, end)
    if start is None or end is None:
        return cand
    fwd = run_dead_reckoning(imu, (*start.p, 0.0), env, noise, cfg, p0_sigma=start.sigma, record=record)
    bwd = run_dead_reckoning(imu, (*end.p, 0.0), env, noise, cfg, backward=True, p0_sigma=end.sigma, record=record)
    cand.forward, cand.backward = fwd, bwd
    cand.forward_end = fwd.pos[-1, :2].copy()
    cand.backward_end = bwd.pos[0, :2].copy()
    return cand


def smooth_segment(cand: SegmentCandidate) -> SmoothedTrack:
    if cand.forward is None or cand.backward is None:
        raise ValueError(f"segment {cand.trace_id} has no DR solutions")
    return smooth(Track.from_dr(cand.forward), Track.from_dr(cand.backward))
