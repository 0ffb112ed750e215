"""Grid fingerprint databases and AP path-loss estimation.

Databases are built from smoothed crowdsourced tracks: every observation is
attached to the position of its nearest track epoch, binned into square cells of
side ``cell_length``, and each cell keeps per-feature mean / variance / count.
WiFi features are AP identifiers (RSS in dBm); magnetic features are the leveled
horizontal ``"h"`` and vertical ``"v"`` intensities in Gauss.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np
from numpy.typing import ArrayLike, NDArray

from fpfuse.crowdsourcing import SmoothedTrack

RSS_MIN = -100.0
RSS_ABSENT = -95.0
DB_FORMAT = "fpfuse.fingerprint-db"
DB_VERSION = 1


class GeometryError(ValueError):
    """Observation geometry cannot determine the unknowns (singular normal matrix)."""


class ConvergenceError(RuntimeError):
    """Iterative estimation did not converge."""


@dataclass
class RssObservation:
    t: float
    readings: dict[str, float]

    def __post_init__(self):
        for ap, r in self.readings.items():
            if not (RSS_MIN <= r <= 0.0):
                raise ValueError(f"RSS {r} dBm for {ap} outside [-100, 0]")

    def usable(self, floor: float = RSS_ABSENT) -> dict[str, float]:
        """Readings at or above the absence floor."""
        return {ap: r for ap, r in self.readings.items() if r >= floor}


@dataclass
class MagneticProfile:
    """Gradient profile over the last few steps.

    ``h`` / ``v`` are the horizontal and vertical intensities minus their first
    element (so both start at zero).  ``offsets`` are the step positions relative
    to the last step, used to look up expected profiles in a map.
    """

    h: NDArray[np.float64]
    v: NDArray[np.float64]
    offsets: NDArray[np.float64] | None = None
    t: float = float("nan")

    def features(self) -> NDArray[np.float64]:
        """Gradient features excluding the zero first elements."""
        return np.concatenate([self.h[1:], self.v[1:]])

    def __len__(self):
        return len(self.h)


def leveled_components(mag_b: ArrayLike, C_bn: ArrayLike) -> tuple[NDArray, NDArray]:
    """Horizontal magnitude and vertical component of body-frame fields.

    Only roll and pitch of ``C_bn`` matter: a heading rotation leaves both unchanged.
    """
    m = np.asarray(mag_b, dtype=float).reshape(-1, 3)
    C = np.asarray(C_bn, dtype=float).reshape(-1, 3, 3)
    m_n = np.einsum("kij,kj->ki", C, m)
    return np.hypot(m_n[:, 0], m_n[:, 1]), m_n[:, 2]


def extract_magnetic_profile(mag_b: ArrayLike, C_bn: ArrayLike, positions: ArrayLike | None = None,
                             window: int = 10, t: float = float("nan")) -> MagneticProfile:
    """Build a gradient profile from the last ``window`` per-step samples."""
    m = np.asarray(mag_b, dtype=float).reshape(-1, 3)
    C = np.asarray(C_bn, dtype=float).reshape(-1, 3, 3)
    if len(m) < window or len(C) < window:
        raise ValueError(f"profile needs {window} step samples, got {min(len(m), len(C))}")
    h, v = leveled_components(m[-window:], C[-window:])
    offsets = None
    if positions is not None:
        p = np.asarray(positions, dtype=float).reshape(-1, 2)[-window:]
        offsets = p - p[-1]
    return MagneticProfile(h - h[0], v - v[0], offsets, t)


# ---------------------------------------------------------------------------
# database


@dataclass
class FeatureStats:
    mean: float
    var: float
    count: int


@dataclass
class Fingerprint:
    index: tuple[int, int]
    rp_location: tuple[float, float]
    rp_sigma: float
    features: dict[str, FeatureStats]
    count: int
    dsf: float | None = None


@dataclass
class ApEstimate:
    ap_id: str
    x: float
    y: float
    beta1: float
    beta2: float
    covariance: NDArray[np.float64]
    n_obs: int = 0
    rms_residual: float = float("nan")

    def __post_init__(self):
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(4, 4)

    @property
    def position(self) -> NDArray[np.float64]:
        return np.array([self.x, self.y])

    def rss(self, d: ArrayLike) -> NDArray[np.float64]:
        return path_loss_rss(d, self.beta1, self.beta2)

    def distance(self, rss: ArrayLike) -> NDArray[np.float64]:
        """Distance implied by an RSS value under this AP's path-loss model."""
        return np.power(10.0, (self.beta2 - np.asarray(rss, dtype=float)) / (10.0 * self.beta1))


def path_loss_rss(d: ArrayLike, beta1: float, beta2: float) -> NDArray[np.float64]:
    """Log-distance model ``-10 beta1 log10(d) + beta2``."""
    return -10.0 * beta1 * np.log10(np.asarray(d, dtype=float)) + beta2


@dataclass
class FingerprintDatabase:
    modality: str
    origin: tuple[float, float]
    cell_length: float
    cells: dict[tuple[int, int], Fingerprint] = field(default_factory=dict)
    aps: dict[str, ApEstimate] = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.cell_length > 0:
            raise ValueError("cell_length must be positive")
        if self.modality not in ("wifi", "magnetic"):
            raise ValueError(f"unknown modality {self.modality!r}")

    def __len__(self):
        return len(self.cells)

    def cell_index(self, p: ArrayLike) -> NDArray[np.int64]:
        p = np.asarray(p, dtype=float)
        return np.floor((p - np.asarray(self.origin)) / self.cell_length).astype(np.int64)

    def cell_center(self, index) -> tuple[float, float]:
        i, j = index
        return (self.origin[0] + (i + 0.5) * self.cell_length, self.origin[1] + (j + 0.5) * self.cell_length)

    # dense views used by matching; invalidated by ``refresh``
    @cached_property
    def keys(self) -> list[tuple[int, int]]:
        return sorted(self.cells)

    @cached_property
    def feature_names(self) -> list[str]:
        names = set()
        for fp in self.cells.values():
            names.update(fp.features)
        return sorted(names)

    @cached_property
    def arrays(self) -> dict[str, NDArray]:
        keys, names = self.keys, self.feature_names
        col = {n: j for j, n in enumerate(names)}
        n, m = len(keys), len(names)
        mu = np.zeros((n, m))
        var = np.ones((n, m))
        mask = np.zeros((n, m), dtype=bool)
        rp = np.zeros((n, 2))
        rp_sigma = np.zeros(n)
        dsf = np.full(n, np.nan)
        idx = np.zeros((n, 2), dtype=np.int64)
        for i, k in enumerate(keys):
            fp = self.cells[k]
            for name, st in fp.features.items():
                j = col[name]
                mu[i, j], var[i, j], mask[i, j] = st.mean, st.var, True
            rp[i] = fp.rp_location
            rp_sigma[i] = fp.rp_sigma
            idx[i] = k
            if fp.dsf is not None:
                dsf[i] = fp.dsf
        return {"mu": mu, "var": var, "mask": mask, "rp": rp, "rp_sigma": rp_sigma, "dsf": dsf, "index": idx}

    @cached_property
    def _grid_lookup(self) -> tuple[NDArray, NDArray]:
        idx = self.arrays["index"]
        if len(idx) == 0:
            return np.zeros(2, dtype=np.int64), -np.ones((0, 0), dtype=np.int64)
        lo = idx.min(axis=0)
        hi = idx.max(axis=0)
        table = -np.ones(tuple(hi - lo + 1), dtype=np.int64)
        table[idx[:, 0] - lo[0], idx[:, 1] - lo[1]] = np.arange(len(idx))
        return lo, table

    def refresh(self) -> None:
        for name in ("keys", "feature_names", "arrays", "_grid_lookup"):
            self.__dict__.pop(name, None)

    def row_at(self, points: ArrayLike) -> NDArray[np.int64]:
        """Row in :attr:`arrays` of the cell containing each point, or -1."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        lo, table = self._grid_lookup
        if table.size == 0:
            return -np.ones(len(pts), dtype=np.int64)
        ij = self.cell_index(pts) - lo
        ok = (ij[:, 0] >= 0) & (ij[:, 1] >= 0) & (ij[:, 0] < table.shape[0]) & (ij[:, 1] < table.shape[1])
        out = -np.ones(len(pts), dtype=np.int64)
        out[ok] = table[ij[ok, 0], ij[ok, 1]]
        return out

    # -- persistence -------------------------------------------------------
    def to_dict(self, manifest: str | None = None) -> dict:
        cells = []
        for k in sorted(self.cells):
            fp = self.cells[k]
            cells.append(
                {
                    "index": [int(fp.index[0]), int(fp.index[1])],
                    "rp": [float(fp.rp_location[0]), float(fp.rp_location[1])],
                    "rp_sigma": float(fp.rp_sigma),
                    "count": int(fp.count),
                    "dsf": None if fp.dsf is None else float(fp.dsf),
                    "features": {
                        name: [float(st.mean), float(st.var), int(st.count)]
                        for name, st in sorted(fp.features.items())
                    },
                }
            )
        aps = []
        for ap_id in sorted(self.aps):
            a = self.aps[ap_id]
            aps.append(
                {
                    "ap_id": a.ap_id,
                    "x": float(a.x),
                    "y": float(a.y),
                    "beta1": float(a.beta1),
                    "beta2": float(a.beta2),
                    "covariance": [[float(v) for v in row] for row in a.covariance],
                    "n_obs": int(a.n_obs),
                    "rms_residual": None if not math.isfinite(a.rms_residual) else float(a.rms_residual),
                }
            )
        out = {
            "format": DB_FORMAT,
            "version": DB_VERSION,
            "modality": self.modality,
            "origin": [float(self.origin[0]), float(self.origin[1])],
            "cell_length": float(self.cell_length),
            "params": self.params,
            "cells": cells,
            "aps": aps,
        }
        if manifest is not None:
            out["manifest"] = manifest
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "FingerprintDatabase":
        if d.get("format") != DB_FORMAT:
            raise ValueError("not a fingerprint database document")
        db = cls(d["modality"], tuple(d["origin"]), d["cell_length"], params=dict(d.get("params", {})))
        for c in d["cells"]:
            idx = (int(c["index"][0]), int(c["index"][1]))
            feats = {name: FeatureStats(v[0], v[1], int(v[2])) for name, v in c["features"].items()}
            db.cells[idx] = Fingerprint(idx, tuple(c["rp"]), c["rp_sigma"], feats, int(c["count"]), c["dsf"])
        for a in d.get("aps", []):
            rms = a.get("rms_residual")
            db.aps[a["ap_id"]] = ApEstimate(a["ap_id"], a["x"], a["y"], a["beta1"], a["beta2"],
                                            np.array(a["covariance"]), a.get("n_obs", 0),
                                            float("nan") if rms is None else rms)
        db._manifest = d.get("manifest")
        return db

    def dumps(self, manifest: str | None = None) -> str:
        if manifest is None:
            manifest = getattr(self, "_manifest", None)
        return json.dumps(self.to_dict(manifest), indent=1, sort_keys=True) + "\n"

    def save(self, path: str | os.PathLike, manifest: str | None = None) -> None:
        atomic_write_text(path, self.dumps(manifest))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FingerprintDatabase":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class MapSample:
    """One observation attached to a smoothed position."""

    p: tuple[float, float]
    sigma: float
    features: dict[str, float]


DEFAULT_VARIANCE = {"wifi": 5.0**2, "magnetic": 0.03**2}
MIN_VARIANCE = {"wifi": 0.5**2, "magnetic": 0.002**2}


def build_database(samples: Iterable[MapSample], modality: str, cell_length: float = 3.0,
                   lambda_n1: int = 5, lambda_n2: int = 20, default_variance: float | None = None,
                   origin: tuple[float, float] = (0.0, 0.0), min_variance: float | None = None) -> FingerprintDatabase:
    """Bin samples into grid cells and fit per-feature Gaussians.

    Cells with fewer than ``lambda_n1`` samples are dropped.  A feature seen fewer
    than ``lambda_n2`` times in a cell gets ``default_variance``; otherwise its
    population variance, floored at ``min_variance``.  The cell's RP uncertainty is
    the RMS of its members' smoothed-position sigmas.
    """
    if not cell_length > 0:
        raise ValueError("cell_length must be positive")
    if lambda_n1 > lambda_n2:
        raise ValueError("lambda_n1 must not exceed lambda_n2")
    if modality not in DEFAULT_VARIANCE:
        raise ValueError(f"unknown modality {modality!r}")
    default_variance = DEFAULT_VARIANCE[modality] if default_variance is None else default_variance
    min_variance = MIN_VARIANCE[modality] if min_variance is None else min_variance
    db = FingerprintDatabase(modality, tuple(origin), cell_length,
                             params={"lambda_n1": lambda_n1, "lambda_n2": lambda_n2,
                                     "default_variance": default_variance, "min_variance": min_variance})
    groups: dict[tuple[int, int], list[MapSample]] = {}
    for s in samples:
        i, j = db.cell_index(np.asarray(s.p, dtype=float))
        groups.setdefault((int(i), int(j)), []).append(s)
    for key in sorted(groups):
        members = groups[key]
        if len(members) < lambda_n1:
            continue
        values: dict[str, list[float]] = {}
        for s in members:
            for name, val in s.features.items():
                values.setdefault(name, []).append(val)
        feats = {}
        for name in sorted(values):
            arr = np.asarray(values[name], dtype=float)
            mean = float(arr.mean())
            if len(arr) < lambda_n2:
                var = default_variance
            else:
                var = max(float(np.mean((arr - mean) ** 2)), min_variance)
            feats[name] = FeatureStats(mean, var, len(arr))
        sig = np.asarray([s.sigma for s in members], dtype=float)
        rp_sigma = float(np.sqrt(np.mean(sig**2)))
        db.cells[key] = Fingerprint(key, db.cell_center(key), rp_sigma, feats, len(members))
    return db


def wifi_samples(track: SmoothedTrack, observations: Iterable[RssObservation], tol: float = 0.1,
                 floor: float = RSS_ABSENT) -> list[MapSample]:
    out = []
    for obs in observations:
        k = track.at(obs.t, tol)
        if k is None:
            continue
        feats = obs.usable(floor)
        if feats:
            out.append(MapSample((float(track.p_sm[k, 0]), float(track.p_sm[k, 1])), float(track.sigma_sm[k]), feats))
    return out


def magnetic_samples(track: SmoothedTrack, t: ArrayLike, mag_b: ArrayLike, C_bn: ArrayLike,
                     tol: float = 0.1) -> list[MapSample]:
    """Leveled intensities at the given epochs attached to the smoothed positions."""
    h, v = leveled_components(mag_b, C_bn)
    out = []
    for tk, hk, vk in zip(np.asarray(t, dtype=float), h, v):
        k = track.at(float(tk), tol)
        if k is None:
            continue
        out.append(MapSample((float(track.p_sm[k, 0]), float(track.p_sm[k, 1])), float(track.sigma_sm[k]),
                             {"h": float(hk), "v": float(vk)}))
    return out


# ---------------------------------------------------------------------------
# AP location and path-loss parameters


def _rss_jacobian(xa: NDArray, pts: NDArray, d_min: float) -> tuple[NDArray, NDArray, NDArray]:
    dx = xa[0] - pts[:, 0]
    dy = xa[1] - pts[:, 1]
    d = np.maximum(np.hypot(dx, dy), d_min)
    pred = -10.0 * xa[2] * np.log10(d) + xa[3]
    k = -10.0 * xa[2] / (d * d * math.log(10.0))
    H = np.column_stack([k * dx, k * dy, -10.0 * np.log10(d), np.ones_like(d)])
    return pred, H, d


def estimate_ap(positions: ArrayLike, rssi: ArrayLike, sigma: float | ArrayLike = 2.0, ap_id: str = "",
                tol: float = 1e-4, max_iter: int = 50, d_min: float = 0.5) -> ApEstimate:
    """Weighted Gauss-Newton fit of AP position and path-loss parameters.

    Starts at the RSS-power-weighted centroid of the observation points with
    ``beta1 = 2`` and ``beta2`` equal to the strongest reading.  Steps are halved
    until the weighted residual does not increase.  Returns the estimate with
    covariance ``(H^T R^-1 H)^-1`` at the solution.
    """
    pts = np.asarray(positions, dtype=float).reshape(-1, 2)
    r = np.asarray(rssi, dtype=float).ravel()
    if len(pts) != len(r):
        raise ValueError("positions and rssi differ in length")
    if len(r) < 8:
        raise GeometryError(f"need at least 8 observations, got {len(r)}")
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-6 * max(sv[0], 1e-12):
        raise GeometryError("observation points are collinear")
    w_r = 1.0 / np.broadcast_to(np.asarray(sigma, dtype=float), r.shape) ** 2
    w = np.power(10.0, (r - r.max()) / 10.0)
    xa = np.array([*(w @ pts / w.sum()), 2.0, float(r.max())])

    def cost(x):
        pred, _, _ = _rss_jacobian(x, pts, d_min)
        res = r - pred
        return float(res @ (w_r * res))

    c = cost(xa)
    for _ in range(max_iter):
        pred, H, _ = _rss_jacobian(xa, pts, d_min)
        res = r - pred
        N = H.T @ (w_r[:, None] * H)
        if np.linalg.cond(N) > 1e12:
            raise GeometryError("singular normal matrix in AP estimation")
        step = np.linalg.solve(N, H.T @ (w_r * res))
        lam = 1.0
        for _ in range(30):
            cand = xa + lam * step
            cc = cost(cand)
            if cc <= c:
                break
            lam *= 0.5
        else:
            cand, cc = xa, c
        moved = float(np.linalg.norm(cand - xa))
        xa, c = cand, cc
        if moved < tol:
            pred, H, _ = _rss_jacobian(xa, pts, d_min)
            N = H.T @ (w_r[:, None] * H)
            if np.linalg.cond(N) > 1e12:
                raise GeometryError("singular normal matrix in AP estimation")
            cov = np.linalg.inv(N)
            cov = 0.5 * (cov + cov.T)
            rms = float(np.sqrt(np.mean((r - pred) ** 2)))
            return ApEstimate(ap_id, float(xa[0]), float(xa[1]), float(xa[2]), float(xa[3]), cov, len(r), rms)
    raise ConvergenceError(f"AP estimation did not converge in {max_iter} iterations")


def fit_aps(samples: Iterable[MapSample], sigma: float = 4.0, min_obs: int = 8,
            beta1_range: tuple[float, float] = (0.5, 6.0)) -> dict[str, ApEstimate]:
    """Estimate every AP seen in the samples; APs that fail or look implausible are skipped."""
    by_ap: dict[str, tuple[list, list]] = {}
    for s in samples:
        for ap, val in s.features.items():
            pts, vals = by_ap.setdefault(ap, ([], []))
            pts.append(s.p)
            vals.append(val)
    out = {}
    for ap in sorted(by_ap):
        pts, vals = by_ap[ap]
        if len(vals) < min_obs:
            continue
        try:
            est = estimate_ap(pts, vals, sigma, ap_id=ap)
        except (GeometryError, ConvergenceError, np.linalg.LinAlgError):
            continue
        if beta1_range[0] < est.beta1 < beta1_range[1]:
            out[ap] = est
    return out
