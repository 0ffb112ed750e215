"""Pure numpy implementations of the hot loops.

Same signatures and in-place semantics as the compiled ``_kernels`` module, which
is preferred when importable.  See :mod:`fpfuse.kernels`.
"""

from __future__ import annotations

import math

import numpy as np


def _skew(x, y, z):
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_vector_to_dcm(theta):
    """Rodrigues formula for the rotation matrix of rotation vector ``theta``."""
    a = math.sqrt(theta[0] * theta[0] + theta[1] * theta[1] + theta[2] * theta[2])
    K = _skew(theta[0], theta[1], theta[2])
    if a < 1e-8:
        s = 1.0 - a * a / 6.0
        c = 0.5 - a * a / 24.0
    else:
        s = math.sin(a) / a
        c = (1.0 - math.cos(a)) / (a * a)
    return np.eye(3) + s * K + c * (K @ K)


def ins_span(p, v, C, bg, ba, P, gyro, accel, t, k0, k1, g_n, w_ie, tau_g, tau_a, qdiag,
             pos_out, pvar_out, use_earth):
    """Mechanize samples ``k0..k1-1`` and propagate the error covariance.

    Sample ``k`` covers the interval ``[t[k-1], t[k]]``.  ``p, v, C, P`` are updated
    in place; ``pos_out[k]`` and ``pvar_out[k]`` receive the position and its
    variance diagonal after each step.
    """
    I3 = np.eye(3)
    Phi = np.eye(15)
    Wie = _skew(w_ie[0], w_ie[1], w_ie[2]) if use_earth else None
    for k in range(k0, k1):
        dt = t[k] - t[k - 1]
        w = gyro[k] - bg
        if use_earth:
            w = w - C.T @ w_ie
        f = accel[k] - ba
        C_mid = C @ rotation_vector_to_dcm(0.5 * dt * w)
        f_n = C_mid @ f
        acc = f_n + g_n
        if use_earth:
            acc = acc - 2.0 * np.cross(w_ie, v)
        v_new = v + acc * dt
        p += 0.5 * (v + v_new) * dt
        v[:] = v_new
        C_new = C @ rotation_vector_to_dcm(dt * w)
        # one Bjorck step keeps C orthonormal to within rounding
        C[:, :] = 1.5 * C_new - 0.5 * C_new @ C_new.T @ C_new

        Phi[:] = 0.0
        np.fill_diagonal(Phi, 1.0)
        Phi[0:3, 3:6] = I3 * dt
        Phi[3:6, 6:9] = _skew(f_n[0], f_n[1], f_n[2]) * dt
        Phi[3:6, 12:15] = C_mid * dt
        Phi[6:9, 9:12] = -C_mid * dt
        Phi[9:12, 9:12] -= I3 * (dt / tau_g)
        Phi[12:15, 12:15] -= I3 * (dt / tau_a)
        if use_earth:
            Phi[3:6, 3:6] -= 2.0 * Wie * dt
            Phi[6:9, 6:9] -= Wie * dt
        P[:, :] = Phi @ P @ Phi.T
        P[np.diag_indices(15)] += qdiag * dt
        pos_out[k] = p
        pvar_out[k, 0] = P[0, 0]
        pvar_out[k, 1] = P[1, 1]
        pvar_out[k, 2] = P[2, 2]


def kf_update(P, H, R, z):
    """Kalman update in Joseph form on error state zero; returns the state correction.

    ``P`` is overwritten by the posterior covariance.
    """
    PHt = P @ H.T
    S = H @ PHt + R
    K = np.linalg.solve(S, PHt.T).T
    dx = K @ z
    A = np.eye(P.shape[0]) - K @ H
    P[:, :] = A @ P @ A.T + K @ R @ K.T
    return dx


def gauss_loglik(q, qmask, mu, var, fmask, floor, out_ll, out_n):
    """Per-fingerprint Gaussian log-likelihood over shared features.

    ``mu, var, fmask`` are ``(n_fp, n_feat)``; each per-feature term is floored at
    ``floor`` nats before summing.  ``out_n[i]`` counts the shared features.
    """
    shared = fmask & qmask[None, :]
    d = q[None, :] - mu
    with np.errstate(invalid="ignore", divide="ignore"):
        terms = -0.5 * d * d / var - 0.5 * np.log(2.0 * math.pi * var)
    terms = np.maximum(terms, floor)
    terms = np.where(shared, terms, 0.0)
    out_ll[:] = terms.sum(axis=1)
    out_n[:] = shared.sum(axis=1)
