"""Pure numpy/scipy versions of the compiled kernels in ``_core.pyx``.

Signatures and results match the compiled module; these are selected
automatically when the extension is not built.
"""
import numpy as np
import scipy.sparse as sp


def rk4_csr(indptr, indices, data, bdiag, y0, eps_full, eps_half, h, n_steps, stride, n_keep):
    n = len(indptr) - 1
    A = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    b = np.asarray(bdiag)[:, None]
    y = np.array(y0, dtype=complex, copy=True)
    record = np.empty((n_steps // stride + 1, n_keep, y.shape[1]), dtype=complex)
    record[0] = y[:n_keep]

    def f(eps, z):
        return A @ z + eps * (b * z)

    r = 0
    for step in range(n_steps):
        k1 = f(eps_full[step], y)
        k2 = f(eps_half[step], y + 0.5 * h * k1)
        k3 = f(eps_half[step], y + 0.5 * h * k2)
        k4 = f(eps_full[step + 1], y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        finite = np.isfinite(y).all(axis=1)
        if not finite.all():
            return record, step + 1, int(np.argmin(finite))
        if (step + 1) % stride == 0:
            r += 1
            record[r] = y[:n_keep]
    return record, -1, -1


def volterra(k1, k3, lhs_inv, h):
    n_lag = k1.shape[0]
    out = np.zeros((n_lag, 4, 4))
    if n_lag == 0:
        return out
    out[0] = k1[0]
    for n in range(1, n_lag):
        s = 0.5 * k3[n] @ out[0]
        if n > 1:
            s = s + np.einsum("jac,jcb->ab", k3[1:n], out[n - 1:0:-1])
        out[n] = lhs_inv @ (k1[n] + h * s)
    return out


def conv_trapz(A, B, h):
    n_lag = A.shape[0]
    out = np.zeros((n_lag, 4, 4))
    for n in range(1, n_lag):
        prod = np.einsum("jac,jcb->jab", A[: n + 1], B[n::-1])
        out[n] = h * (prod.sum(axis=0) - 0.5 * (prod[0] + prod[-1]))
    return out
