"""Gaussian-likelihood fingerprint matching for WiFi and magnetic data.

Likelihoods are accumulated as log sums with every per-feature term floored at
``LOG_FLOOR`` nats, then exponentiated relative to the best candidate.  The
reported weights are therefore likelihood ratios; positions and rankings are
unaffected by the common scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from numpy.typing import ArrayLike, NDArray

from fpfuse import kernels
from fpfuse.mapping import Fingerprint, FingerprintDatabase, MagneticProfile

LOG_FLOOR = -30.0


class NoCandidatesError(ValueError):
    """No fingerprint in the search region shares enough features with the query."""


@dataclass(frozen=True)
class Region:
    center: tuple[float, float]
    radius: float


@dataclass
class MatchResult:
    position: NDArray[np.float64]
    rows: NDArray[np.int64]
    log_likelihood: NDArray[np.float64]
    weights: NDArray[np.float64]
    modality: str
    cells: list[tuple[int, int]] = field(default_factory=list)
    n_shared: NDArray[np.int64] | None = None
    fallback: bool = False
    region: Region | None = None

    @property
    def kappa(self) -> int:
        return len(self.rows)

    def rp_sigma(self, db: FingerprintDatabase) -> float:
        """Likelihood-weighted RP uncertainty of the selected fingerprints."""
        s = db.arrays["rp_sigma"][self.rows]
        return float(np.sqrt(np.sum(self.weights * s**2) / np.sum(self.weights)))


def log_likelihood(q: Mapping[str, float], fp: Fingerprint, floor: float = LOG_FLOOR) -> tuple[float, int]:
    """Floored Gaussian log-likelihood over the features shared by ``q`` and ``fp``."""
    total, n = 0.0, 0
    for name, val in q.items():
        st = fp.features.get(name)
        if st is None:
            continue
        term = -0.5 * (val - st.mean) ** 2 / st.var - 0.5 * math.log(2.0 * math.pi * st.var)
        total += max(term, floor)
        n += 1
    return total, n


def likelihood(q: Mapping[str, float], fp: Fingerprint, floor: float = LOG_FLOOR) -> float:
    """Product of per-feature Gaussian densities; 0 when nothing is shared."""
    ll, n = log_likelihood(q, fp, floor)
    return math.exp(ll) if n else 0.0


def query_vector(q: Mapping[str, float], names: list[str]) -> tuple[NDArray, NDArray]:
    col = {n: j for j, n in enumerate(names)}
    vec = np.zeros(len(names))
    mask = np.zeros(len(names), dtype=bool)
    for name, val in q.items():
        j = col.get(name)
        if j is not None:
            vec[j] = val
            mask[j] = True
    return vec, mask


def _in_region(rp: NDArray, region: Region | None) -> NDArray[np.bool_]:
    if region is None:
        return np.ones(len(rp), dtype=bool)
    d = np.hypot(rp[:, 0] - region.center[0], rp[:, 1] - region.center[1])
    return d <= region.radius


def _select(ll: NDArray, valid: NDArray, index: NDArray, kappa: int) -> NDArray[np.int64]:
    """Top-``kappa`` valid rows by log-likelihood, ties to the smaller cell index."""
    rows = np.flatnonzero(valid)
    order = np.lexsort((index[rows, 1], index[rows, 0], -ll[rows]))
    return rows[order[:kappa]]


def _result(db: FingerprintDatabase, rows: NDArray, ll: NDArray, n_shared: NDArray, region, fallback=False):
    w = np.exp(ll - ll.max())
    rp = db.arrays["rp"][rows]
    pos = (w[:, None] * rp).sum(axis=0) / w.sum()
    cells = [tuple(int(v) for v in db.arrays["index"][r]) for r in rows]
    return MatchResult(pos, rows, ll, w, db.modality, cells, n_shared, fallback, region)


def score(q: Mapping[str, float], db: FingerprintDatabase, floor: float = LOG_FLOOR) -> tuple[NDArray, NDArray]:
    """Log-likelihood and shared-feature count of ``q`` against every fingerprint."""
    arr = db.arrays
    qv, qm = query_vector(q, db.feature_names)
    n = len(db.keys)
    ll = np.zeros(n)
    cnt = np.zeros(n, dtype=np.int64)
    if n:
        kernels.gauss_loglik(qv, qm, arr["mu"], arr["var"], arr["mask"], floor, ll, cnt)
    return ll, cnt


def match(q: Mapping[str, float], db: FingerprintDatabase, kappa: int = 5, region: Region | None = None,
          min_shared: int | None = None, floor: float = LOG_FLOOR) -> MatchResult:
    """Weighted average of the ``kappa`` most likely RPs.

    ``min_shared`` defaults to 3 for WiFi and 1 otherwise; fingerprints sharing
    fewer features with the query are not candidates.
    """
    if kappa < 1:
        raise ValueError("kappa must be at least 1")
    if len(db) == 0:
        raise NoCandidatesError("empty database")
    if min_shared is None:
        min_shared = 3 if db.modality == "wifi" else 1
    ll, cnt = score(q, db, floor)
    valid = (cnt >= min_shared) & _in_region(db.arrays["rp"], region)
    if not np.any(valid):
        raise NoCandidatesError("no fingerprint in the search region shares enough features")
    rows = _select(ll, valid, db.arrays["index"], kappa)
    return _result(db, rows, ll[rows], cnt[rows], region)


# ---------------------------------------------------------------------------
# magnetic profiles


def expected_profiles(db: FingerprintDatabase, rows: NDArray, offsets: NDArray) -> tuple[NDArray, NDArray, NDArray]:
    """Gradient-profile statistics implied by the map for each candidate RP.

    For candidate ``c`` the profile points are ``rp_c + offsets``.  Feature ``j`` of
    the horizontal part has mean ``mu_h(j) - mu_h(0)`` and variance
    ``var_h(j) + var_h(0)``; the vertical part likewise.  Returns ``(mu, var,
    mask)`` of shape ``(n_candidates, 2 (W - 1))``.
    """
    arr = db.arrays
    names = db.feature_names
    jh, jv = names.index("h"), names.index("v")
    rp = arr["rp"][rows]
    W = len(offsets)
    pts = rp[:, None, :] + offsets[None, :, :]
    r = db.row_at(pts.reshape(-1, 2)).reshape(len(rows), W)
    ok = r >= 0
    rr = np.where(ok, r, 0)
    out_mu, out_var, out_mask = [], [], []
    for j in (jh, jv):
        mu = arr["mu"][rr, j]
        var = arr["var"][rr, j]
        m = ok & arr["mask"][rr, j]
        out_mu.append(mu[:, 1:] - mu[:, :1])
        out_var.append(var[:, 1:] + var[:, :1])
        out_mask.append(m[:, 1:] & m[:, :1])
    return np.hstack(out_mu), np.hstack(out_var), np.hstack(out_mask)


def match_profile(profile: MagneticProfile, db: FingerprintDatabase, kappa: int = 5, region: Region | None = None,
                  min_shared_frac: float = 0.5, floor: float = LOG_FLOOR) -> MatchResult:
    """Match a gradient profile whose last step is at the candidate RP."""
    if db.modality != "magnetic":
        raise ValueError("profile matching needs a magnetic database")
    if profile.offsets is None:
        raise ValueError("profile has no step offsets")
    if len(db) == 0:
        raise NoCandidatesError("empty database")
    cand = np.flatnonzero(_in_region(db.arrays["rp"], region))
    if len(cand) == 0:
        raise NoCandidatesError("no fingerprint in the search region")
    q = profile.features()
    mu, var, mask = expected_profiles(db, cand, np.asarray(profile.offsets, dtype=float))
    ll = np.zeros(len(cand))
    cnt = np.zeros(len(cand), dtype=np.int64)
    kernels.gauss_loglik(np.ascontiguousarray(q), np.ones(len(q), dtype=bool), np.ascontiguousarray(mu),
                         np.ascontiguousarray(var), np.ascontiguousarray(mask), floor, ll, cnt)
    need = max(1, int(math.ceil(min_shared_frac * len(q))))
    valid = cnt >= need
    if not np.any(valid):
        raise NoCandidatesError("no candidate covers enough of the profile")
    # rank by mean log term so partially covered candidates are comparable
    score_ = np.where(valid, ll / np.maximum(cnt, 1) * len(q), -np.inf)
    sel = _select(score_, valid, db.arrays["index"][cand], kappa)
    rows = cand[sel]
    return _result(db, rows, score_[sel], cnt[sel], region)


def match_magnetic_constrained(profile: MagneticProfile, db_mag: FingerprintDatabase, wifi_pos: ArrayLike,
                               wifi_accuracy: float, kappa: int = 5, factor: float = 3.0) -> MatchResult:
    """Profile matching inside a circle of ``factor * wifi_accuracy`` around ``wifi_pos``.

    An empty circle falls back to the unconstrained search with ``fallback=True``.
    """
    if not wifi_accuracy > 0:
        raise ValueError("wifi_accuracy must be positive")
    c = np.asarray(wifi_pos, dtype=float).reshape(2)
    region = Region((float(c[0]), float(c[1])), factor * float(wifi_accuracy))
    try:
        return match_profile(profile, db_mag, kappa, region)
    except NoCandidatesError:
        res = match_profile(profile, db_mag, kappa, None)
        res.fallback = True
        res.region = region
        return res
