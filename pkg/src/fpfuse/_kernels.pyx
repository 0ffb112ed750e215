# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled hot loops: strapdown span, Joseph-form update, batch log-likelihood.

Signatures and in-place semantics mirror ``fpfuse._pykernels``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sin, cos, log, M_PI

cnp.import_array()


cdef inline void _rotvec_dcm(double tx, double ty, double tz, double[:, ::1] R) noexcept nogil:
    cdef double a2 = tx * tx + ty * ty + tz * tz
    cdef double a = sqrt(a2)
    cdef double s, c
    if a < 1e-8:
        s = 1.0 - a2 / 6.0
        c = 0.5 - a2 / 24.0
    else:
        s = sin(a) / a
        c = (1.0 - cos(a)) / a2
    # R = I + s K + c K^2, K = [t x], K^2 = t t^T - a2 I
    R[0, 0] = 1.0 + c * (tx * tx - a2)
    R[0, 1] = -s * tz + c * tx * ty
    R[0, 2] = s * ty + c * tx * tz
    R[1, 0] = s * tz + c * tx * ty
    R[1, 1] = 1.0 + c * (ty * ty - a2)
    R[1, 2] = -s * tx + c * ty * tz
    R[2, 0] = -s * ty + c * tx * tz
    R[2, 1] = s * tx + c * ty * tz
    R[2, 2] = 1.0 + c * (tz * tz - a2)


cdef inline void _mm3(double[:, ::1] A, double[:, ::1] B, double[:, ::1] out) noexcept nogil:
    cdef int i, j, k
    cdef double acc
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += A[i, k] * B[k, j]
            out[i, j] = acc


def ins_span(double[::1] p, double[::1] v, double[:, ::1] C, double[::1] bg, double[::1] ba,
             double[:, ::1] P, double[:, ::1] gyro, double[:, ::1] accel, double[::1] t,
             Py_ssize_t k0, Py_ssize_t k1, double[::1] g_n, double[::1] w_ie,
             double tau_g, double tau_a, double[::1] qdiag,
             double[:, ::1] pos_out, double[:, ::1] pvar_out, bint use_earth):
    cdef double[:, ::1] R = np.empty((3, 3))
    cdef double[:, ::1] Cm = np.empty((3, 3))
    cdef double[:, ::1] Cn = np.empty((3, 3))
    cdef double[:, ::1] T1 = np.empty((3, 3))
    cdef double[:, ::1] T2 = np.empty((3, 3))
    cdef double[:, ::1] Phi = np.zeros((15, 15))
    cdef double[:, ::1] A = np.empty((15, 15))
    cdef double w[3]
    cdef double f[3]
    cdef double fn[3]
    cdef double acc[3]
    cdef double vn[3]
    cdef Py_ssize_t k, i, j, m
    cdef double dt, s
    with nogil:
        for k in range(k0, k1):
            dt = t[k] - t[k - 1]
            for i in range(3):
                w[i] = gyro[k, i] - bg[i]
                f[i] = accel[k, i] - ba[i]
            if use_earth:
                for i in range(3):
                    s = 0.0
                    for j in range(3):
                        s += C[j, i] * w_ie[j]
                    w[i] -= s
            _rotvec_dcm(0.5 * dt * w[0], 0.5 * dt * w[1], 0.5 * dt * w[2], R)
            _mm3(C, R, Cm)
            for i in range(3):
                fn[i] = Cm[i, 0] * f[0] + Cm[i, 1] * f[1] + Cm[i, 2] * f[2]
                acc[i] = fn[i] + g_n[i]
            if use_earth:
                acc[0] -= 2.0 * (w_ie[1] * v[2] - w_ie[2] * v[1])
                acc[1] -= 2.0 * (w_ie[2] * v[0] - w_ie[0] * v[2])
                acc[2] -= 2.0 * (w_ie[0] * v[1] - w_ie[1] * v[0])
            for i in range(3):
                vn[i] = v[i] + acc[i] * dt
                p[i] += 0.5 * (v[i] + vn[i]) * dt
                v[i] = vn[i]
            _rotvec_dcm(dt * w[0], dt * w[1], dt * w[2], R)
            _mm3(C, R, Cn)
            # Bjorck step: C = 1.5 Cn - 0.5 Cn Cn^T Cn
            for i in range(3):
                for j in range(3):
                    s = 0.0
                    for m in range(3):
                        s += Cn[m, i] * Cn[m, j]
                    T1[i, j] = s
            _mm3(Cn, T1, T2)
            for i in range(3):
                for j in range(3):
                    C[i, j] = 1.5 * Cn[i, j] - 0.5 * T2[i, j]

            for i in range(15):
                for j in range(15):
                    Phi[i, j] = 0.0
                Phi[i, i] = 1.0
            for i in range(3):
                Phi[i, 3 + i] = dt
                Phi[9 + i, 9 + i] = 1.0 - dt / tau_g
                Phi[12 + i, 12 + i] = 1.0 - dt / tau_a
                for j in range(3):
                    Phi[3 + i, 12 + j] = Cm[i, j] * dt
                    Phi[6 + i, 9 + j] = -Cm[i, j] * dt
            Phi[3, 7] = -fn[2] * dt
            Phi[3, 8] = fn[1] * dt
            Phi[4, 6] = fn[2] * dt
            Phi[4, 8] = -fn[0] * dt
            Phi[5, 6] = -fn[1] * dt
            Phi[5, 7] = fn[0] * dt
            if use_earth:
                Phi[3, 4] += 2.0 * w_ie[2] * dt
                Phi[3, 5] -= 2.0 * w_ie[1] * dt
                Phi[4, 3] -= 2.0 * w_ie[2] * dt
                Phi[4, 5] += 2.0 * w_ie[0] * dt
                Phi[5, 3] += 2.0 * w_ie[1] * dt
                Phi[5, 4] -= 2.0 * w_ie[0] * dt
                Phi[6, 7] += w_ie[2] * dt
                Phi[6, 8] -= w_ie[1] * dt
                Phi[7, 6] -= w_ie[2] * dt
                Phi[7, 8] += w_ie[0] * dt
                Phi[8, 6] += w_ie[1] * dt
                Phi[8, 7] -= w_ie[0] * dt
            # A = Phi P ; P = A Phi^T + Q dt
            for i in range(15):
                for j in range(15):
                    s = 0.0
                    for m in range(15):
                        s += Phi[i, m] * P[m, j]
                    A[i, j] = s
            for i in range(15):
                for j in range(i, 15):
                    s = 0.0
                    for m in range(15):
                        s += A[i, m] * Phi[j, m]
                    P[i, j] = s
                    P[j, i] = s
                P[i, i] += qdiag[i] * dt
            for i in range(3):
                pos_out[k, i] = p[i]
                pvar_out[k, i] = P[i, i]


def kf_update(double[:, ::1] P, H_in, R_in, z_in):
    cdef double[:, ::1] H = np.ascontiguousarray(H_in, dtype=np.float64)
    cdef double[:, ::1] R = np.ascontiguousarray(R_in, dtype=np.float64)
    cdef double[::1] z = np.ascontiguousarray(z_in, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0]
    cdef Py_ssize_t mdim = H.shape[0]
    cdef double[:, ::1] PHt = np.empty((n, mdim))
    cdef double[:, ::1] S = np.empty((mdim, mdim))
    cdef double[:, ::1] Si = np.zeros((mdim, mdim))
    cdef double[:, ::1] K = np.empty((n, mdim))
    cdef double[:, ::1] Amat = np.empty((n, n))
    cdef double[:, ::1] T = np.empty((n, n))
    dx_arr = np.zeros(n)
    cdef double[::1] dx = dx_arr
    cdef Py_ssize_t i, j, m, r, piv
    cdef double s, best, tmp
    for i in range(n):
        for j in range(mdim):
            s = 0.0
            for m in range(n):
                s += P[i, m] * H[j, m]
            PHt[i, j] = s
    for i in range(mdim):
        for j in range(mdim):
            s = R[i, j]
            for m in range(n):
                s += H[i, m] * PHt[m, j]
            S[i, j] = s
        Si[i, i] = 1.0
    # Gauss-Jordan inverse with partial pivoting (mdim is tiny)
    for i in range(mdim):
        piv = i
        best = abs(S[i, i])
        for r in range(i + 1, mdim):
            if abs(S[r, i]) > best:
                best = abs(S[r, i])
                piv = r
        if best == 0.0:
            raise np.linalg.LinAlgError("singular innovation covariance")
        if piv != i:
            for j in range(mdim):
                tmp = S[i, j]; S[i, j] = S[piv, j]; S[piv, j] = tmp
                tmp = Si[i, j]; Si[i, j] = Si[piv, j]; Si[piv, j] = tmp
        tmp = S[i, i]
        for j in range(mdim):
            S[i, j] /= tmp
            Si[i, j] /= tmp
        for r in range(mdim):
            if r != i:
                tmp = S[r, i]
                if tmp != 0.0:
                    for j in range(mdim):
                        S[r, j] -= tmp * S[i, j]
                        Si[r, j] -= tmp * Si[i, j]
    for i in range(n):
        for j in range(mdim):
            s = 0.0
            for m in range(mdim):
                s += PHt[i, m] * Si[m, j]
            K[i, j] = s
        s = 0.0
        for j in range(mdim):
            s += K[i, j] * z[j]
        dx[i] = s
    # Amat = I - K H
    for i in range(n):
        for j in range(n):
            s = 0.0
            for m in range(mdim):
                s += K[i, m] * H[m, j]
            Amat[i, j] = -s
        Amat[i, i] += 1.0
    # T = Amat P
    for i in range(n):
        for j in range(n):
            s = 0.0
            for m in range(n):
                s += Amat[i, m] * P[m, j]
            T[i, j] = s
    # P = T Amat^T + K R K^T
    for i in range(n):
        for j in range(i, n):
            s = 0.0
            for m in range(n):
                s += T[i, m] * Amat[j, m]
            for m in range(mdim):
                for r in range(mdim):
                    s += K[i, m] * R[m, r] * K[j, r]
            P[i, j] = s
            P[j, i] = s
    return dx_arr


def gauss_loglik(double[::1] q, q_mask, double[:, ::1] mu, double[:, ::1] var, f_mask,
                 double floor, double[::1] out_ll, out_n_arr):
    cdef cnp.uint8_t[::1] qmask = np.ascontiguousarray(q_mask, dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] fmask = np.ascontiguousarray(f_mask, dtype=np.uint8)
    cdef Py_ssize_t nfp = mu.shape[0], nf = mu.shape[1]
    cdef Py_ssize_t i, j
    cdef double acc, d, term
    cdef double l2pi = log(2.0 * M_PI)
    counts = np.zeros(nfp, dtype=np.int64)
    cdef cnp.int64_t[::1] cnt = counts
    cdef cnp.int64_t c
    with nogil:
        for i in range(nfp):
            acc = 0.0
            c = 0
            for j in range(nf):
                if qmask[j] and fmask[i, j]:
                    d = q[j] - mu[i, j]
                    term = -0.5 * d * d / var[i, j] - 0.5 * (l2pi + log(var[i, j]))
                    if term < floor:
                        term = floor
                    acc += term
                    c += 1
            out_ll[i] = acc
            cnt[i] = c
    out_n_arr[:] = counts
