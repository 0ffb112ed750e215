"""Small linear-algebra helpers and error statistics shared across the package."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray


def skew(v: ArrayLike) -> NDArray[np.float64]:
    """Cross-product matrix of a 3-vector, so that ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array(
        [
            [0.0, -z, y],
            [z, 0.0, -x],
            [-y, x, 0.0],
        ]
    )


def check_shape(a: NDArray, shape: tuple[int, ...], name: str = "array") -> NDArray:
    a = np.asarray(a, dtype=float)
    if a.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def solve_spd(A: ArrayLike, b: ArrayLike) -> NDArray[np.float64]:
    """Solve ``A x = b`` for symmetric positive-definite ``A`` via Cholesky.

    Raises ``np.linalg.LinAlgError`` when ``A`` is not positive definite.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: A {A.shape}, b {b.shape}")
    L = np.linalg.cholesky(A)
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


def symmetrize(P: NDArray) -> tuple[NDArray, bool]:
    """Return ``(P + P^T)/2`` and whether the asymmetry exceeded 1e-9."""
    asym = float(np.max(np.abs(P - P.T))) if P.size else 0.0
    return 0.5 * (P + P.T), asym > 1e-9


@dataclass(frozen=True)
class ErrorStats:
    std_m: float
    mean_m: float
    rms_m: float
    p80_m: float
    p95_m: float
    max_m: float

    def as_row(self) -> list[float]:
        return [self.std_m, self.mean_m, self.rms_m, self.p80_m, self.p95_m, self.max_m]

    COLUMNS = ("std_m", "mean_m", "rms_m", "p80_m", "p95_m", "max_m")


@dataclass(frozen=True)
class CdfCurve:
    errors: NDArray[np.float64]
    probabilities: NDArray[np.float64]


def nearest_rank(sorted_values: NDArray, q: float) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th smallest value (1-based)."""
    n = len(sorted_values)
    rank = max(1, math.ceil(q * n - 1e-12))
    return float(sorted_values[min(rank, n) - 1])


def error_stats(errors: Sequence[float] | ArrayLike) -> ErrorStats:
    """Summary statistics of non-negative location errors in meters.

    Percentiles use the nearest-rank rule. STD is the population standard deviation.
    """
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("error_stats needs at least one error value")
    if not np.all(np.isfinite(e)) or np.any(e < 0):
        raise ValueError("errors must be finite and non-negative")
    s = np.sort(e)
    mean = float(np.mean(s))
    rms = float(np.sqrt(np.mean(s * s)))
    # guard rounding so that mean <= rms always holds
    rms = max(rms, mean)
    return ErrorStats(
        std_m=float(np.std(s)),
        mean_m=mean,
        rms_m=rms,
        p80_m=nearest_rank(s, 0.80),
        p95_m=nearest_rank(s, 0.95),
        max_m=float(s[-1]),
    )


def error_cdf(errors: Sequence[float] | ArrayLike) -> CdfCurve:
    e = np.sort(np.asarray(errors, dtype=float).ravel())
    if e.size == 0:
        raise ValueError("error_cdf needs at least one error value")
    prob = np.arange(1, e.size + 1, dtype=float) / e.size
    return CdfCurve(errors=e, probabilities=prob)


class Correlation(NamedTuple):
    coef: float
    degenerate: bool


def correlation(actual: ArrayLike, predicted: ArrayLike) -> Correlation:
    """Pearson correlation between actual errors and predicted accuracies.

    A zero-variance series (e.g. the constant strategy) yields ``coef = 0`` with
    ``degenerate = True`` instead of raising.
    """
    a = np.asarray(actual, dtype=float).ravel()
    b = np.asarray(predicted, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("correlation needs at least two samples")
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(da @ da))
    sb = math.sqrt(float(db @ db))
    # relative threshold: a series that is constant up to rounding counts as constant
    if sa <= 1e-12 * max(1.0, float(np.abs(a).max())) * math.sqrt(a.size) or sb <= 1e-12 * max(
        1.0, float(np.abs(b).max())
    ) * math.sqrt(b.size):
        return Correlation(0.0, True)
    c = float(da @ db) / (sa * sb)
    return Correlation(min(1.0, max(-1.0, c)), False)
