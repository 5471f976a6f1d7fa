# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.

rk4_csr      fixed-step RK4 for y' = A y + eps(t) * b * y with sparse A (CSR)
             and diagonal b, for several right-hand sides at once.
volterra     trapezoidal time stepping of K = K1 + (K3 * K) for 4x4 kernels.
conv_trapz   trapezoidal matrix convolution sum_j A_j B_{n-j}.

The numpy reference implementations live in ``_core_py``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport isfinite

cnp.import_array()

cdef enum:
    MAX_RHS = 16


cdef inline void _apply(const int[::1] indptr, const int[::1] indices,
                        const double[::1] data, const double[::1] bdiag, double eps,
                        const double[:, ::1] y, double[:, ::1] out) noexcept nogil:
    # Complex arithmetic is spelled out on interleaved (re, im) pairs: the C
    # complex multiply goes through __muldc3 for IEEE corner cases and is
    # several times slower.
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t m2 = y.shape[1]
    cdef Py_ssize_t i, j, c, p
    cdef double ar, ai, yr, yi
    cdef double acc[2 * MAX_RHS]
    for i in range(n):
        ar = eps * bdiag[2 * i]
        ai = eps * bdiag[2 * i + 1]
        for c in range(0, m2, 2):
            yr = y[i, c]
            yi = y[i, c + 1]
            acc[c] = ar * yr - ai * yi
            acc[c + 1] = ar * yi + ai * yr
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            ar = data[2 * p]
            ai = data[2 * p + 1]
            for c in range(0, m2, 2):
                yr = y[j, c]
                yi = y[j, c + 1]
                acc[c] += ar * yr - ai * yi
                acc[c + 1] += ar * yi + ai * yr
        for c in range(m2):
            out[i, c] = acc[c]


def rk4_csr(const int[::1] indptr, const int[::1] indices, data, bdiag, y0,
            const double[::1] eps_full, const double[::1] eps_half,
            double h, Py_ssize_t n_steps, Py_ssize_t stride, Py_ssize_t n_keep):
    """Propagate and record the first ``n_keep`` rows every ``stride`` steps.

    Returns (record, bad_step, bad_row); bad_step = -1 if all values stayed
    finite, otherwise the step after which the first non-finite row appeared.
    """
    y_np = np.array(y0, dtype=np.complex128, order="C", copy=True)
    if y_np.ndim != 2 or y_np.shape[1] > MAX_RHS:
        raise ValueError(f"y0 must be (n, m) with m <= {MAX_RHS}")
    cdef const double[::1] dat = np.ascontiguousarray(data, dtype=np.complex128).view(np.float64)
    cdef const double[::1] bd = np.ascontiguousarray(bdiag, dtype=np.complex128).view(np.float64)
    cdef Py_ssize_t n = y_np.shape[0]
    cdef Py_ssize_t m2 = 2 * y_np.shape[1]
    cdef Py_ssize_t n_rec = n_steps // stride + 1
    record_np = np.empty((n_rec, n_keep, y_np.shape[1]), dtype=np.complex128)
    cdef double[:, :, ::1] record = record_np.view(np.float64)
    cdef double[:, ::1] y = y_np.view(np.float64)
    cdef double[:, ::1] k1 = np.empty((n, m2))
    cdef double[:, ::1] k2 = np.empty((n, m2))
    cdef double[:, ::1] k3 = np.empty((n, m2))
    cdef double[:, ::1] k4 = np.empty((n, m2))
    cdef double[:, ::1] tmp = np.empty((n, m2))
    cdef Py_ssize_t step, i, c, r = 0
    cdef Py_ssize_t bad_step = -1, bad_row = -1
    cdef double h2 = 0.5 * h, h6 = h / 6.0
    cdef double v

    with nogil:
        for i in range(n_keep):
            for c in range(m2):
                record[0, i, c] = y[i, c]
        for step in range(n_steps):
            _apply(indptr, indices, dat, bd, eps_full[step], y, k1)
            for i in range(n):
                for c in range(m2):
                    tmp[i, c] = y[i, c] + h2 * k1[i, c]
            _apply(indptr, indices, dat, bd, eps_half[step], tmp, k2)
            for i in range(n):
                for c in range(m2):
                    tmp[i, c] = y[i, c] + h2 * k2[i, c]
            _apply(indptr, indices, dat, bd, eps_half[step], tmp, k3)
            for i in range(n):
                for c in range(m2):
                    tmp[i, c] = y[i, c] + h * k3[i, c]
            _apply(indptr, indices, dat, bd, eps_full[step + 1], tmp, k4)
            for i in range(n):
                for c in range(m2):
                    v = y[i, c] + h6 * (k1[i, c] + 2.0 * (k2[i, c] + k3[i, c]) + k4[i, c])
                    y[i, c] = v
                    if bad_row < 0 and not isfinite(v):
                        bad_row = i
            if bad_row >= 0:
                bad_step = step + 1
                break
            if (step + 1) % stride == 0:
                r += 1
                for i in range(n_keep):
                    for c in range(m2):
                        record[r, i, c] = y[i, c]
    return record_np, bad_step, bad_row


def volterra(const double[:, :, ::1] k1, const double[:, :, ::1] k3,
             const double[:, ::1] lhs_inv, double h):
    """K_n = lhs_inv @ (K1_n + h * [sum_{j=1}^{n-1} K3_j K_{n-j} + K3_n K_0 / 2])."""
    cdef Py_ssize_t n_lag = k1.shape[0]
    out_np = np.zeros((n_lag, 4, 4), dtype=np.float64)
    cdef double[:, :, ::1] out = out_np
    cdef double rhs[4][4]
    cdef Py_ssize_t n, j, a, b, c
    cdef double s
    if n_lag == 0:
        return out_np
    with nogil:
        for a in range(4):
            for b in range(4):
                out[0, a, b] = k1[0, a, b]
        for n in range(1, n_lag):
            for a in range(4):
                for b in range(4):
                    s = 0.5 * (k3[n, a, 0] * out[0, 0, b] + k3[n, a, 1] * out[0, 1, b]
                               + k3[n, a, 2] * out[0, 2, b] + k3[n, a, 3] * out[0, 3, b])
                    for j in range(1, n):
                        for c in range(4):
                            s += k3[j, a, c] * out[n - j, c, b]
                    rhs[a][b] = k1[n, a, b] + h * s
            for a in range(4):
                for b in range(4):
                    s = 0.0
                    for c in range(4):
                        s += lhs_inv[a, c] * rhs[c][b]
                    out[n, a, b] = s
    return out_np


def conv_trapz(const double[:, :, ::1] A, const double[:, :, ::1] B, double h):
    """Trapezoidal integral of A(s') B(t - s') over [0, t] at every grid t."""
    cdef Py_ssize_t n_lag = A.shape[0]
    out_np = np.zeros((n_lag, 4, 4), dtype=np.float64)
    cdef double[:, :, ::1] out = out_np
    cdef Py_ssize_t n, j, a, b, c
    cdef double s, w
    with nogil:
        for n in range(1, n_lag):
            for a in range(4):
                for b in range(4):
                    s = 0.0
                    for j in range(n + 1):
                        w = 0.5 if (j == 0 or j == n) else 1.0
                        for c in range(4):
                            s += w * A[j, a, c] * B[n - j, c, b]
                    out[n, a, b] = h * s
    return out_np
