"""Memory-kernel extraction for the generalized quantum master equation.

For undriven dynamics C(t, tau) = C(t - tau) and the correlation matrix obeys

    dC/dt = C(t) X - int_0^t C(t') K(t - t') dt'.

The kernel is obtained from projection-free input: the auxiliary kernels

    K3(s) = -dC/ds + X C(s),        K1(s) = dK3/ds - K3(s) X,

are computed by finite differences of the stored trajectory, and K solves
the Volterra equation K(s) = K1(s) + int_0^s K3(s') K(s - s') ds'.

Columns nu of K whose sigma_nu commutes with the whole Liouvillian up to a
system operator (nu = 0 always, and nu = z for sigma_z coupling) vanish
identically, because Q L sigma_nu = 0.  Numerically they carry only the
discretization floor, so they are flagged and skipped by kernel_timescale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import _backend
from .derivatives import time_derivative
from .errors import ConfigError, KernelNotDecayedError, NumericalError
from .model import PAULI, ModelParams, system_hamiltonian
from .stcf import StcfTrajectory

__all__ = [
    "DriftMatrix",
    "KernelTrajectory",
    "BornMarkov",
    "drift_matrix",
    "drift_series",
    "kernel_k3",
    "kernel_k1",
    "solve_volterra",
    "extract_kernel",
    "gqme_residual",
    "bm_generator",
    "bm_propagate",
    "bm_stationary",
    "kernel_timescale",
    "KERNEL_COLUMNS",
]

KERNEL_COLUMNS = tuple(f"K_{a}{b}" for a in "0xyz" for b in "0xyz")
MAX_VOLTERRA_CONDITION = 1e10
TAIL_FRACTION = 0.01
# Kernel columns that vanish identically for sigma_z coupling (identity, sigma_z).
ZERO_COLUMNS = (0, 3)


def drift_matrix(p: ModelParams, t: float = 0.0) -> np.ndarray:
    """X_{mu nu}(t) = (i/2) tr[sigma_mu [H_s(t), sigma_nu]].

    The bath part of the Liouvillian drops out under the thermal bath trace,
    so only the system Hamiltonian contributes.
    """
    h = system_hamiltonian(t, p).matrix
    comm = np.einsum("ij,njk->nik", h, PAULI) - np.einsum("nij,jk->nik", PAULI, h)
    x = 0.5j * np.einsum("mij,nji->mn", PAULI, comm)
    return x.real.copy()


@dataclass(frozen=True)
class DriftMatrix:
    times: np.ndarray
    x: np.ndarray
    constant: bool

    def at(self, i: int = 0) -> np.ndarray:
        return self.x[0] if self.constant else self.x[i]


def drift_series(p: ModelParams, times) -> DriftMatrix:
    times = np.asarray(times, dtype=float)
    if not p.driven:
        return DriftMatrix(times, drift_matrix(p)[None], True)
    return DriftMatrix(times, np.array([drift_matrix(p, t) for t in times]), False)


def _constant_x(x) -> np.ndarray:
    if isinstance(x, DriftMatrix):
        if not x.constant:
            raise ConfigError("kernel extraction supports undriven (constant-drift) dynamics only")
        return x.x[0]
    x = np.asarray(x, dtype=float)
    if x.shape != (4, 4):
        raise ConfigError("drift matrix must be 4x4")
    return x


def kernel_k3(traj: StcfTrajectory, x, richardson: bool = False) -> np.ndarray:
    """K3(s) = -dC/ds + X C(s) on the trajectory lags."""
    x = _constant_x(x)
    cdot = time_derivative(traj.c, traj.dt, order=4 if richardson else 2)
    return -cdot + np.einsum("ab,tbc->tac", x, traj.c)


def kernel_k1(k3: np.ndarray, x, h: float, richardson: bool = False) -> np.ndarray:
    """K1(s) = dK3/ds - K3(s) X; one-sided differences at both ends."""
    x = _constant_x(x)
    return time_derivative(k3, h, order=4 if richardson else 2) - np.einsum("tab,bc->tac", k3, x)


@dataclass(frozen=True)
class KernelTrajectory:
    """Memory kernel K(s) and its auxiliary kernels on a lag grid."""

    t_grid: np.ndarray
    k: np.ndarray
    k3: np.ndarray
    k1: np.ndarray
    x: np.ndarray
    meta: dict
    zero_columns: tuple[int, ...] = ()

    @property
    def dt(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0])

    @property
    def norm_series(self) -> np.ndarray:
        return np.max(np.abs(self.k), axis=(1, 2))

    def to_csv(self, path):
        from .io import write_csv

        flat = self.k.reshape(len(self.t_grid), 16)
        return write_csv(path, ("s",) + KERNEL_COLUMNS, [self.t_grid, *flat.T])


def solve_volterra(k1: np.ndarray, k3: np.ndarray, h: float, backend: str | None = None) -> np.ndarray:
    """Trapezoidal time stepping of K(s) = K1(s) + int_0^s K3(s') K(s - s') ds'.

    The implicit diagonal term (h/2) K3(0) K(s) is moved to the left-hand
    side, leaving one fixed 4x4 linear system per lag.
    """
    k1 = np.ascontiguousarray(k1, dtype=float)
    k3 = np.ascontiguousarray(k3, dtype=float)
    if k1.shape != k3.shape or k1.shape[1:] != (4, 4):
        raise ConfigError("k1 and k3 must be matching (n, 4, 4) series")
    lhs = np.eye(4) - 0.5 * h * k3[0]
    cond = np.linalg.cond(lhs)
    if not cond <= MAX_VOLTERRA_CONDITION:
        raise NumericalError(f"Volterra diagonal solve is ill-conditioned (condition {cond:.3g})")
    core = _backend.core if backend is None else _backend.get(backend)
    return core.volterra(k1, k3, np.ascontiguousarray(np.linalg.inv(lhs)), float(h))


def extract_kernel(traj: StcfTrajectory, x=None, richardson: bool = False,
                   backend: str | None = None) -> KernelTrajectory:
    """Full pipeline C -> K3 -> K1 -> K for an undriven trajectory."""
    if x is None:
        if traj.params is None:
            raise ConfigError("a drift matrix is required for trajectories without parameters")
        if traj.params.driven:
            raise ConfigError("kernel extraction supports undriven (constant-drift) dynamics only")
        x = drift_matrix(traj.params)
    x = _constant_x(x)
    h = traj.dt
    k3 = kernel_k3(traj, x, richardson)
    k1 = kernel_k1(k3, x, h, richardson)
    k = solve_volterra(k1, k3, h, backend=backend)
    meta = {"derivative_order": 4 if richardson else 2, "edge_stencil": "one-sided",
            "k3_at_zero": float(np.max(np.abs(k3[0])))}
    return KernelTrajectory(traj.lags, k, k3, k1, x, meta, ZERO_COLUMNS)


def gqme_residual(traj: StcfTrajectory, x, kernel: KernelTrajectory,
                  backend: str | None = None, richardson: bool = False) -> float:
    """max_t max_{mu nu} |dC/dt - C X + int_0^t C(t') K(t - t') dt'|."""
    x = _constant_x(x)
    n = min(len(traj.t_grid), len(kernel.t_grid))
    c = np.ascontiguousarray(traj.c[:n])
    k = np.ascontiguousarray(kernel.k[:n])
    core = _backend.core if backend is None else _backend.get(backend)
    conv = core.conv_trapz(c, k, traj.dt)
    cdot = time_derivative(traj.c, traj.dt, order=4 if richardson else 2)[:n]
    r = cdot - np.einsum("tab,bc->tac", c, x) + conv
    return float(np.max(np.abs(r)))


def _tail_stats(kernel: KernelTrajectory):
    norms = kernel.norm_series
    peak = float(norms.max())
    n = len(norms)
    tail_start = max(1, int(0.95 * n))
    tail = float(norms[tail_start:].max())
    # Decay rate of the running envelope over the second half of the window.
    env = np.maximum.accumulate(norms[::-1])[::-1]
    mid = n // 2
    span = kernel.t_grid[-1] - kernel.t_grid[mid]
    rate = math.log(env[mid] / env[-1]) / span if env[-1] > 0 and env[mid] > env[-1] else 0.0
    return peak, tail, rate


@dataclass(frozen=True)
class BornMarkov:
    matrix: np.ndarray
    truncation_bound: float

    @property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues of the spatial (x, y, z) block."""
        return np.linalg.eigvals(self.matrix[1:, 1:])


def bm_generator(x, kernel: KernelTrajectory) -> BornMarkov:
    """M_BM = X - int_0^infinity K, truncated at the last available lag.

    Refuses kernels whose tail exceeds 1% of the peak; the error carries an
    estimate of the lag window needed from the observed envelope decay.
    """
    x = _constant_x(x)
    peak, tail, rate = _tail_stats(kernel)
    if peak == 0.0:
        return BornMarkov(x.copy(), 0.0)
    t_end = float(kernel.t_grid[-1])
    if tail >= TAIL_FRACTION * peak:
        if rate > 0:
            need = t_end + math.log(tail / (TAIL_FRACTION * peak)) / rate
        else:
            need = 2.0 * t_end
        raise KernelNotDecayedError(
            f"kernel tail is {tail / peak:.2%} of its peak at s={t_end:g}; "
            f"extend the lag window to about {need:.3g}",
            required_t_final=need,
        )
    integral = np.trapezoid(kernel.k, dx=kernel.dt, axis=0)
    bound = tail / rate if rate > 0 else tail * t_end
    return BornMarkov(x - integral, float(bound))


def bm_propagate(m_bm, t_grid) -> StcfTrajectory:
    """C_BM(t) = [exp(t M^T)]^T = exp(t M) on the given grid."""
    m = np.asarray(m_bm.matrix if isinstance(m_bm, BornMarkov) else m_bm, dtype=float)
    t = np.asarray(t_grid, dtype=float)
    c = scipy.linalg.expm(t[:, None, None] * m[None])
    return StcfTrajectory(t, c, start_time=float(t[0]))


def bm_stationary(m_bm) -> np.ndarray:
    """lim_{t->inf} exp(t M): e_0 w^T with w the left null vector, w_0 = 1."""
    m = np.asarray(m_bm.matrix if isinstance(m_bm, BornMarkov) else m_bm, dtype=float)
    w, vl = scipy.linalg.eig(m, left=True, right=False)
    k = int(np.argmin(np.abs(w)))
    left = vl[:, k].conj()
    left = (left / left[0]).real
    out = np.zeros((4, 4))
    out[0] = left
    return out


def kernel_timescale(kernel: KernelTrajectory, delta: float = 0.9) -> float | None:
    """tau_K: the largest lag at which int_0^tau |K_mn| reaches delta of its total.

    Channels whose integral vanishes, and the columns flagged in
    ``kernel.zero_columns``, are skipped; ``None`` marks a kernel that is zero
    everywhere.
    """
    if not 0.0 < delta < 1.0:
        raise ConfigError("delta must lie in (0, 1)")
    from scipy.integrate import cumulative_trapezoid

    absk = np.abs(kernel.k).reshape(len(kernel.t_grid), 16)
    cum = cumulative_trapezoid(absk, dx=kernel.dt, axis=0, initial=0.0)
    totals = cum[-1]
    scale = totals.max()
    if scale <= 0.0:
        return None
    best = -math.inf
    for j in range(16):
        if j % 4 in kernel.zero_columns or totals[j] <= 1e-12 * scale:
            continue
        frac = cum[:, j] / totals[j]
        i = int(np.searchsorted(frac, delta))
        if i == 0:
            tau = float(kernel.t_grid[0])
        else:
            f0, f1 = frac[i - 1], frac[i]
            s0, s1 = kernel.t_grid[i - 1], kernel.t_grid[i]
            tau = float(s0 + (delta - f0) * (s1 - s0) / (f1 - f0))
        best = max(best, tau)
    return best
