"""Fingerprinting accuracy indicators (FAI).

Each indicator predicts the 1-sigma error, in meters, of a fingerprinting fix:

* SS: mean per-feature score from signal strength (WiFi) or gradient size (magnetic)
* SD: scaled DOP from AP geometry (WiFi) or gradient directions (magnetic)
* WD: likelihood-weighted DSF (distance between similar fingerprints) of the
  selected fingerprints
* MC / MCM: linear combination / maximum of the three

Values that cannot be computed return the 50 m sentinel with ``degenerate=True``;
every value is capped at the sentinel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from fpfuse import kernels
from fpfuse.fingerprinting import LOG_FLOOR, MatchResult
from fpfuse.mapping import ApEstimate, FingerprintDatabase, MagneticProfile

SENTINEL = 50.0
STRATEGIES = ("ct", "ss", "sd", "wd", "mc", "mcm")


@dataclass(frozen=True)
class FaiConfig:
    alpha_ss_wifi: float = 0.2
    alpha_ss_mag: float = 50.0
    alpha_sd_wifi: float = 5.0
    alpha_sd_mag: float = 1.0
    rho_ss: float = 0.2
    rho_sd: float = 0.3
    rho_wd: float = 0.5
    kappa_d: int = 5
    sentinel: float = SENTINEL

    def __post_init__(self):
        for name in ("alpha_ss_wifi", "alpha_ss_mag", "alpha_sd_wifi", "alpha_sd_mag"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if min(self.rho_ss, self.rho_sd, self.rho_wd) < 0:
            raise ValueError("combination coefficients must be non-negative")
        if self.kappa_d < 1:
            raise ValueError("kappa_d must be at least 1")

    @property
    def rho(self) -> tuple[float, float, float]:
        return (self.rho_ss, self.rho_sd, self.rho_wd)


@dataclass(frozen=True)
class FaiValue:
    value: float
    strategy: str
    modality: str
    degenerate: bool = False

    def __post_init__(self):
        if not (self.value > 0 and math.isfinite(self.value)):
            raise ValueError(f"FAI value must be positive and finite, got {self.value}")


def _capped(value: float, strategy: str, modality: str, cfg: FaiConfig) -> FaiValue:
    if not math.isfinite(value) or value <= 0:
        return FaiValue(cfg.sentinel, strategy, modality, True)
    return FaiValue(min(value, cfg.sentinel), strategy, modality, False)


def sentinel(strategy: str, modality: str, cfg: FaiConfig | None = None) -> FaiValue:
    return FaiValue((cfg or FaiConfig()).sentinel, strategy, modality, True)


# ---------------------------------------------------------------------------
# signal strength


def ss_scores_wifi(readings: Mapping[str, float], aps: Mapping[str, ApEstimate]) -> NDArray[np.float64]:
    """Per-AP score: the path-loss distance ``10 ** ((beta2 - r) / (10 beta1))``."""
    out = [aps[ap].distance(r) for ap, r in sorted(readings.items()) if ap in aps]
    return np.asarray(out, dtype=float)


def fai_ss_wifi(readings: Mapping[str, float], aps: Mapping[str, ApEstimate], cfg: FaiConfig | None = None) -> FaiValue:
    cfg = cfg or FaiConfig()
    c = ss_scores_wifi(readings, aps)
    if c.size == 0:
        return sentinel("ss", "wifi", cfg)
    return _capped(cfg.alpha_ss_wifi * float(c.mean()), "ss", "wifi", cfg)


def fai_ss_mag(profile: MagneticProfile | ArrayLike, cfg: FaiConfig | None = None) -> FaiValue:
    """Mean of ``1 / |m_i|`` over the non-zero gradient features, ``m_i`` in milligauss."""
    cfg = cfg or FaiConfig()
    feats = profile.features() if isinstance(profile, MagneticProfile) else np.asarray(profile, dtype=float).ravel()
    m = np.abs(feats) * 1000.0
    m = m[m > 0]
    if m.size == 0:
        return sentinel("ss", "magnetic", cfg)
    return _capped(cfg.alpha_ss_mag * float(np.mean(1.0 / m)), "ss", "magnetic", cfg)


def fai_ss(features, aps: Mapping[str, ApEstimate] | None = None, cfg: FaiConfig | None = None,
           modality: str = "wifi") -> FaiValue:
    if modality == "wifi":
        return fai_ss_wifi(features, aps or {}, cfg)
    return fai_ss_mag(features, cfg)


# ---------------------------------------------------------------------------
# geometry


def dop(H: ArrayLike) -> float:
    """``sqrt(trace((H^T H)^-1))`` for a two-column design matrix; inf if singular."""
    H = np.asarray(H, dtype=float).reshape(-1, 2)
    if len(H) < 2:
        return math.inf
    N = H.T @ H
    det = N[0, 0] * N[1, 1] - N[0, 1] * N[1, 0]
    if not abs(det) > 1e-10 * max(1.0, float(np.trace(N)) ** 2):
        return math.inf
    return math.sqrt((N[0, 0] + N[1, 1]) / det)


def fai_sd_wifi(position: ArrayLike, ap_positions: ArrayLike, cfg: FaiConfig | None = None) -> FaiValue:
    """Scaled DOP of the unit vectors from the APs to the device."""
    cfg = cfg or FaiConfig()
    p = np.asarray(position, dtype=float).reshape(2)
    a = np.asarray(ap_positions, dtype=float).reshape(-1, 2)
    d = np.linalg.norm(p[None] - a, axis=1)
    keep = d > 1e-9
    H = (p[None] - a[keep]) / d[keep, None]
    g = dop(H)
    if not math.isfinite(g):
        return sentinel("sd", "wifi", cfg)
    return _capped(cfg.alpha_sd_wifi * g, "sd", "wifi", cfg)


def fai_sd_mag(profile: MagneticProfile, cfg: FaiConfig | None = None) -> FaiValue:
    """Scaled DOP of the normalized (horizontal, vertical) gradient directions."""
    cfg = cfg or FaiConfig()
    H = np.column_stack([np.asarray(profile.h, dtype=float), np.asarray(profile.v, dtype=float)])
    n = np.linalg.norm(H, axis=1)
    keep = n > 0
    g = dop(H[keep] / n[keep, None])
    if not math.isfinite(g):
        return sentinel("sd", "magnetic", cfg)
    return _capped(cfg.alpha_sd_mag * g, "sd", "magnetic", cfg)


# ---------------------------------------------------------------------------
# database level


def similarity(db: FingerprintDatabase, floor: float = LOG_FLOOR, min_shared: int | None = None) -> NDArray:
    """Log similarity ``S[i, k]``: fingerprint ``k``'s means scored under ``i``'s model.

    Pairs sharing fewer than ``min_shared`` features (3 for WiFi, 1 otherwise) get -inf.
    """
    arr = db.arrays
    mu, var, mask = arr["mu"], arr["var"], arr["mask"]
    n = len(mu)
    if min_shared is None:
        min_shared = 3 if db.modality == "wifi" else 1
    S = np.full((n, n), -np.inf)
    ll = np.zeros(n)
    cnt = np.zeros(n, dtype=np.int64)
    for k in range(n):
        kernels.gauss_loglik(np.ascontiguousarray(mu[k]), np.ascontiguousarray(mask[k]), mu, var, mask, floor, ll, cnt)
        S[:, k] = np.where(cnt >= min_shared, ll, -np.inf)
    np.fill_diagonal(S, -np.inf)
    return S


def dsf_table(db: FingerprintDatabase, kappa_d: int = 5, floor: float = LOG_FLOOR) -> NDArray[np.float64]:
    """DSF per fingerprint row: mean distance to its ``kappa_d`` most similar others.

    A fingerprint with no comparable peer gets the sentinel.
    """
    arr = db.arrays
    n = len(arr["rp"])
    if n <= kappa_d:
        raise ValueError(f"DSF needs more than kappa_d={kappa_d} fingerprints, database has {n}")
    S = similarity(db, floor)
    rp = arr["rp"]
    idx = arr["index"]
    out = np.empty(n)
    for i in range(n):
        ok = np.isfinite(S[i])
        if not np.any(ok):
            out[i] = SENTINEL
            continue
        rows = np.flatnonzero(ok)
        order = np.lexsort((idx[rows, 1], idx[rows, 0], -S[i, rows]))
        sel = rows[order[:kappa_d]]
        out[i] = float(np.mean(np.linalg.norm(rp[sel] - rp[i], axis=1)))
    return out


def attach_dsf(db: FingerprintDatabase, kappa_d: int = 5) -> FingerprintDatabase:
    """Store the DSF table in the database cells (in place) and return the database."""
    table = dsf_table(db, kappa_d)
    for key, v in zip(db.keys, table):
        db.cells[key].dsf = float(v)
    db.params["kappa_d"] = int(kappa_d)
    db.refresh()
    return db


def dsf(db: FingerprintDatabase, i: int, kappa_d: int = 5) -> float:
    """DSF of fingerprint row ``i`` (see :func:`dsf_table`)."""
    return float(dsf_table(db, kappa_d)[i])


def fai_wd(match: MatchResult, dsf_values: ArrayLike, cfg: FaiConfig | None = None) -> FaiValue:
    """Likelihood-weighted mean of the selected fingerprints' DSF."""
    cfg = cfg or FaiConfig()
    d = np.asarray(dsf_values, dtype=float)
    if d.shape[0] != match.kappa:
        d = d[match.rows]
    w = np.asarray(match.weights, dtype=float)
    if match.kappa == 0:
        raise ValueError("empty match")
    wsum = float(w.sum())
    if not (wsum > 0 and math.isfinite(wsum)):
        value = float(d.mean())
    else:
        value = float((w * d).sum() / wsum)
    return _capped(value, "wd", match.modality, cfg)


# ---------------------------------------------------------------------------
# combination


def inject_rp_uncertainty(fai: FaiValue, sigma_sm: float, cfg: FaiConfig | None = None) -> FaiValue:
    if sigma_sm < 0:
        raise ValueError("sigma_sm must be non-negative")
    cfg = cfg or FaiConfig()
    v = math.hypot(fai.value, sigma_sm)
    return FaiValue(min(v, cfg.sentinel) if not fai.degenerate else fai.value, fai.strategy, fai.modality,
                    fai.degenerate)


def fai_mc(ss: FaiValue | float, sd: FaiValue | float, wd: FaiValue | float,
           rho: Sequence[float] = (0.2, 0.3, 0.5), modality: str | None = None) -> FaiValue:
    vals = [v.value if isinstance(v, FaiValue) else float(v) for v in (ss, sd, wd)]
    mod = modality or next((v.modality for v in (ss, sd, wd) if isinstance(v, FaiValue)), "wifi")
    value = float(rho[0] * vals[0] + rho[1] * vals[1] + rho[2] * vals[2])
    if not value > 0:
        return FaiValue(SENTINEL, "mc", mod, True)
    return FaiValue(value, "mc", mod)


def fai_mcm(ss: FaiValue | float, sd: FaiValue | float, wd: FaiValue | float, modality: str | None = None) -> FaiValue:
    vals = [v.value if isinstance(v, FaiValue) else float(v) for v in (ss, sd, wd)]
    mod = modality or next((v.modality for v in (ss, sd, wd) if isinstance(v, FaiValue)), "wifi")
    return FaiValue(max(vals), "mcm", mod)


def train_mc(ss: ArrayLike, sd: ArrayLike, wd: ArrayLike, actual: ArrayLike,
             min_epochs: int = 30) -> tuple[float, float, float]:
    """No-intercept least squares of actual errors on (ss, sd, wd).

    Negative coefficients are clamped to zero and the remaining ones refit until
    all are non-negative.
    """
    X = np.column_stack([np.asarray(a, dtype=float).ravel() for a in (ss, sd, wd)])
    y = np.asarray(actual, dtype=float).ravel()
    if len(y) != len(X):
        raise ValueError("FAI and error series differ in length")
    if len(y) < min_epochs:
        raise ValueError(f"need at least {min_epochs} epochs, got {len(y)}")
    if np.linalg.matrix_rank(X) < 3:
        raise np.linalg.LinAlgError("FAI regressors are rank deficient")
    active = [0, 1, 2]
    rho = np.zeros(3)
    while active:
        coef, *_ = np.linalg.lstsq(X[:, active], y, rcond=None)
        if np.all(coef >= 0):
            rho[:] = 0.0
            rho[active] = coef
            break
        active = [a for a, c in zip(active, coef) if c > 0]
    return (float(rho[0]), float(rho[1]), float(rho[2]))
