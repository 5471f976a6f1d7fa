"""Non-Markovianity diagnostics computed from a correlation-matrix trajectory.

* trace distance and the BLP information-backflow measure,
* accessible Bloch volume V(t) = |det C(t)| and its backflow measure N_V,
* damping matrix Xi = dC^T/dt (C^T)^-1, decoherence matrix and canonical
  rates, and the full canonical Lindblad decomposition.

Conventions
-----------
The Bloch generator acts as dv/dt = Xi v with v = (1, v_x, v_y, v_z).  The
decoherence matrix xi_ij = 1/4 sum tr[s_l s_i s_r s_j] Xi_rl has eigenvalues
gamma_k obeying -2 sum_k gamma_k = tr Xi.  Written with traceless operators
normalized to tr[L L^dag] = 2, the same generator is

    L[rho] = -i[H_c, rho] + sum_k (gamma_k / 2) (L_k rho L_k^dag - {L_k^dag L_k, rho} / 2).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .derivatives import time_derivative
from .errors import ConfigError, ConsistencyError, InvertibilityError
from .model import PAULI, TwoLevelOperator
from .stcf import BlochVector, StcfTrajectory

__all__ = [
    "RateTrajectory",
    "CanonicalDecomposition",
    "VolumeTrajectory",
    "BlpResult",
    "EternalReport",
    "TAU_TH_THRESHOLD",
    "trace_distance_traj",
    "blp_measure",
    "volume_traj",
    "nv_measure",
    "damping_series",
    "damping_matrix",
    "volume_from_damping",
    "decoherence_matrix",
    "process_matrix",
    "canonical_rates",
    "canonical_decomposition",
    "lindblad_bloch_generator",
    "eternal_nm_detector",
]

TAU_TH_THRESHOLD = 1e-3
MAX_CONDITION = 1e8
HERMITIAN_TOLERANCE = 1e-6
RECONSTRUCTION_TOLERANCE = 1e-6
DEGENERACY_GAP = 1e-8

# tr[s_a s_b s_c s_d] for all Pauli labels.
_TR4 = np.einsum("aij,bjk,ckl,dli->abcd", PAULI, PAULI, PAULI, PAULI)


# -- trace distance / BLP ----------------------------------------------------

def trace_distance_traj(v1: BlochVector, v2: BlochVector, traj: StcfTrajectory) -> np.ndarray:
    """D(t) between the states evolved from Bloch vectors ``v1`` and ``v2``."""
    dv = v1.spatial - v2.spatial
    if not np.any(dv):
        raise ConfigError("the two initial states coincide")
    return 0.5 * np.linalg.norm(np.einsum("i,tij->tj", dv, traj.c[:, 1:, 1:]), axis=1)


def positive_variation(series) -> float:
    """Sum of the positive forward differences of a sampled series."""
    d = np.diff(np.asarray(series, dtype=float))
    return float(d[d > 0].sum())


@dataclass(frozen=True)
class BlpResult:
    n_blp: float
    v_max: BlochVector
    d_max: np.ndarray
    t_grid: np.ndarray
    seed: int
    n_samples: int
    n_blp_decade: float

    @property
    def stability(self) -> float:
        """Growth of the maximum over the last decade of samples."""
        return self.n_blp - self.n_blp_decade

    def summary(self) -> dict:
        return {"n_blp": self.n_blp, "seed": self.seed, "n_samples": self.n_samples,
                "v_max": self.v_max.spatial, "n_blp_decade": self.n_blp_decade}


def sphere_samples(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform unit vectors from normalized Gaussian triples."""
    g = rng.standard_normal((n, 3))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def blp_measure(traj: StcfTrajectory, n_samples: int, seed: int, chunk: int = 2048) -> BlpResult:
    """Monte Carlo maximum of the trace-distance backflow over antipodal pairs.

    For the pair +-v the trace distance is D_v(t) = |C_s(t)^T v| with C_s the
    spatial block, evaluated as sqrt(v^T C_s C_s^T v).  Samples are drawn in
    chunks from ``numpy.random.default_rng(seed)``, so a run with more
    samples extends the sample set of a shorter run.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    cs = traj.c[:, 1:, 1:]
    gram = np.einsum("tij,tkj->tik", cs, cs)
    best, best_v = -1.0, None
    decade = max(1, n_samples // 10)
    best_decade = -1.0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        v = sphere_samples(m, rng)
        d2 = np.einsum("si,tij,sj->st", v, gram, v)
        d = np.sqrt(np.maximum(d2, 0.0))
        inc = np.diff(d, axis=1)
        n_v = np.where(inc > 0, inc, 0.0).sum(axis=1)
        k = int(np.argmax(n_v))
        if n_v[k] > best:
            best, best_v = float(n_v[k]), v[k]
        if done < decade:
            upto = min(m, decade - done)
            best_decade = max(best_decade, float(n_v[:upto].max()))
        done += m
    d_max = np.linalg.norm(np.einsum("i,tij->tj", best_v, cs), axis=1)
    return BlpResult(best, BlochVector(best_v), d_max, traj.t_grid, int(seed), int(n_samples),
                     best_decade)


# -- volume ------------------------------------------------------------------

@dataclass(frozen=True)
class VolumeTrajectory:
    t_grid: np.ndarray
    v: np.ndarray
    tau_th: float

    @property
    def crossed(self) -> bool:
        return np.isfinite(self.tau_th)


def _threshold_time(t: np.ndarray, v: np.ndarray, level: float) -> float:
    below = np.nonzero(v <= level)[0]
    if len(below) == 0:
        return float("inf")
    i = int(below[0])
    if i == 0:
        return float(t[0])
    t0, t1, v0, v1 = t[i - 1], t[i], v[i - 1], v[i]
    return float(t0 + (v0 - level) * (t1 - t0) / (v0 - v1))


def volume_traj(traj: StcfTrajectory) -> VolumeTrajectory:
    """V(t) = |det C^T(t)| and the interpolated time tau_th where V drops to 1e-3."""
    v = np.abs(np.linalg.det(traj.c))
    return VolumeTrajectory(traj.t_grid, v, _threshold_time(traj.t_grid, v, TAU_TH_THRESHOLD))


def nv_measure(vol: VolumeTrajectory) -> float:
    """Positive variation of V(t) normalized by V(0)."""
    return positive_variation(vol.v) / float(vol.v[0])


# -- damping and decoherence matrices -----------------------------------------

def invertible_count(traj: StcfTrajectory, tau_th: float | None = None) -> int:
    """Number of leading grid points inside the invertibility window."""
    if tau_th is None:
        tau_th = volume_traj(traj).tau_th
    cond = np.linalg.cond(traj.c)
    ok = (traj.t_grid <= tau_th) & (cond <= MAX_CONDITION)
    bad = np.nonzero(~ok)[0]
    return len(ok) if len(bad) == 0 else int(bad[0])


def damping_series(traj: StcfTrajectory, richardson: bool = False,
                   n: int | None = None) -> np.ndarray:
    """Xi(t) at the first ``n`` grid points (default: the invertibility window).

    The derivative uses the whole trajectory so interior points near the
    window edge keep the centered stencil.
    """
    if n is None:
        n = invertible_count(traj)
    cdot = time_derivative(traj.c, traj.dt, order=4 if richardson else 2)
    c = traj.c[:n]
    cond = np.linalg.cond(c)
    if np.any(cond > MAX_CONDITION):
        i = int(np.argmax(cond > MAX_CONDITION))
        t = float(traj.t_grid[i])
        raise InvertibilityError(f"C(t) is singular at t={t:.6g} (condition {cond[i]:.3g})", time=t)
    # Xi C^T = Cdot^T  <=>  C Xi^T = Cdot
    return np.linalg.solve(c, cdot[:n]).transpose(0, 2, 1)


def damping_matrix(traj: StcfTrajectory, t: float, richardson: bool = False) -> np.ndarray:
    """Xi(t) = dC^T/dt (C^T)^-1 at grid time ``t``."""
    i = traj.index_of(t)
    return damping_series(traj, richardson=richardson, n=i + 1)[i]


def volume_from_damping(traj: StcfTrajectory, xi: np.ndarray) -> np.ndarray:
    """V(0) exp(int_0^t tr Xi) by the trapezoidal rule on the grid of ``xi``."""
    tr = np.trace(xi, axis1=1, axis2=2)
    v0 = abs(np.linalg.det(traj.c[0]))
    return v0 * np.exp(cumulative_trapezoid(tr, dx=traj.dt, initial=0.0))


def process_matrix(xi_source: np.ndarray) -> np.ndarray:
    """Full 4x4 chi with L[rho] = sum_ab chi_ab s_a rho s_b for Bloch generator(s) Xi."""
    return np.einsum("larb,...rl->...ab", _TR4, np.asarray(xi_source)) / 8.0


def decoherence_matrix(xi_source: np.ndarray) -> np.ndarray:
    """xi_ij = 1/4 sum_{l,r} tr[s_l s_i s_r s_j] Xi_rl for i, j in {x, y, z}.

    Accepts a single 4x4 Xi or a stack; the result is made exactly Hermitian
    after checking the anti-Hermitian residual.
    """
    xi = np.einsum("larb,...rl->...ab", _TR4[:, 1:, :, 1:], np.asarray(xi_source)) / 4.0
    resid = np.max(np.abs(xi - np.conj(np.swapaxes(xi, -1, -2))))
    scale = max(1.0, float(np.max(np.abs(xi))))
    if resid > HERMITIAN_TOLERANCE * scale:
        raise ConsistencyError(f"decoherence matrix anti-Hermitian residual {resid:.3g}")
    return 0.5 * (xi + np.conj(np.swapaxes(xi, -1, -2)))


def _fix_phases(u: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of every column real and positive."""
    idx = np.argmax(np.abs(u), axis=0)
    ph = u[idx, np.arange(u.shape[1])]
    return u * (np.abs(ph) / ph)


def _ordered_eigh(m: np.ndarray, prev: np.ndarray | None):
    w, u = np.linalg.eigh(m)
    if prev is not None and np.min(np.diff(w)) < DEGENERACY_GAP:
        # Keep channel identity continuous through the (near-)degeneracy.
        overlap = np.abs(prev.conj().T @ u)
        order = []
        for k in range(3):
            cand = [j for j in np.argsort(-overlap[k]) if j not in order]
            order.append(cand[0])
        w, u = w[order], u[:, order]
    return w, _fix_phases(u)


@dataclass(frozen=True)
class RateTrajectory:
    t_grid: np.ndarray
    gamma: np.ndarray
    valid_until: float
    trace_xi: np.ndarray

    def sum_rule_residual(self) -> float:
        """max_t |-2 sum_k gamma_k(t) - tr Xi(t)|."""
        return float(np.max(np.abs(-2.0 * self.gamma.sum(axis=1) - self.trace_xi)))


def _window(traj: StcfTrajectory, richardson: bool):
    n = invertible_count(traj)
    if n < 1:
        raise InvertibilityError("C(t) is not invertible at the first grid point",
                                 time=float(traj.t_grid[0]))
    xi = damping_series(traj, richardson=richardson, n=n)
    tau = volume_traj(traj).tau_th
    valid = float(traj.t_grid[n - 1]) if not np.isfinite(tau) else min(tau, float(traj.t_grid[n - 1]))
    return n, xi, valid


def canonical_rates(traj: StcfTrajectory, richardson: bool = False) -> RateTrajectory:
    """Eigenvalues of the decoherence matrix on the invertibility window.

    Rates are ascending, except across near-degeneracies where the ordering
    follows eigenvector continuity with the previous time.
    """
    n, xi, valid = _window(traj, richardson)
    dec = decoherence_matrix(xi)
    gamma = np.empty((n, 3))
    prev = None
    for i in range(n):
        gamma[i], prev = _ordered_eigh(dec[i], prev)
    return RateTrajectory(traj.t_grid[:n], gamma, valid, np.trace(xi, axis1=1, axis2=2))


def lindblad_bloch_generator(h_c, gammas, ops) -> np.ndarray:
    """Bloch generator Xi of -i[H, .] + sum_k (gamma_k/2) D[L_k]."""
    h_c = np.asarray(h_c, dtype=complex)
    out = np.empty((4, 4))
    for lam in range(4):
        s = PAULI[lam]
        d = -1j * (h_c @ s - s @ h_c)
        for g, op in zip(gammas, ops):
            op = np.asarray(op, dtype=complex)
            ld = op.conj().T
            d = d + 0.5 * g * (op @ s @ ld - 0.5 * (ld @ op @ s + s @ ld @ op))
        out[:, lam] = 0.5 * np.einsum("rij,ji->r", PAULI, d).real
    return out


@dataclass(frozen=True)
class CanonicalDecomposition:
    t_grid: np.ndarray
    h_c: tuple[TwoLevelOperator, ...]
    lindblad_ops: tuple[tuple[TwoLevelOperator, ...], ...]
    gamma: RateTrajectory
    max_reconstruction_error: float


def canonical_decomposition(traj: StcfTrajectory, richardson: bool = False) -> CanonicalDecomposition:
    """H_c(t), L_k(t) and gamma_k(t) reproducing Xi(t) on the invertibility window."""
    n, xi, valid = _window(traj, richardson)
    dec = decoherence_matrix(xi)
    chi = process_matrix(xi)
    gamma = np.empty((n, 3))
    hs, ls = [], []
    worst = 0.0
    prev = None
    for i in range(n):
        g, u = _ordered_eigh(dec[i], prev)
        prev = u
        gamma[i] = g
        ops = np.einsum("ik,iab->kab", u, PAULI[1:])
        hhat = 0.5 * chi[i, 0, 0] * PAULI[0] + np.einsum("i,iab->ab", chi[i, 1:, 0], PAULI[1:])
        h = 0.5j * (hhat - hhat.conj().T)
        h = 0.5 * (h + h.conj().T)
        rec = lindblad_bloch_generator(h, g, ops)
        err = float(np.max(np.abs(rec - xi[i])))
        scale = max(1.0, float(np.max(np.abs(xi[i]))))
        if err > RECONSTRUCTION_TOLERANCE * scale:
            raise ConsistencyError(
                f"canonical form does not reproduce the generator at t={traj.t_grid[i]:.6g} "
                f"(error {err:.3g})"
            )
        worst = max(worst, err)
        hs.append(TwoLevelOperator(h, hermitian=True))
        ls.append(tuple(TwoLevelOperator(op) for op in ops))
    rates = RateTrajectory(traj.t_grid[:n], gamma, valid, np.trace(xi, axis1=1, axis2=2))
    return CanonicalDecomposition(traj.t_grid[:n], tuple(hs), tuple(ls), rates, worst)


# -- eternal non-Markovianity ---------------------------------------------------

@dataclass(frozen=True)
class EternalReport:
    eternal: bool
    t_min: float
    t_max: float
    n_points: int
    max_lowest_rate: float
    first_violation: float | None
    tolerance: float


def eternal_nm_detector(rates: RateTrajectory, t_min: float = 0.5,
                        tol_neg: float = 1e-4) -> EternalReport:
    """True iff the lowest rate stays below -tol_neg at every grid t in [t_min, valid_until]."""
    t = rates.t_grid
    mask = (t >= t_min - 1e-9) & (t <= rates.valid_until + 1e-9)
    lowest = rates.gamma.min(axis=1)[mask]
    if lowest.size == 0:
        return EternalReport(False, t_min, rates.valid_until, 0, float("nan"), None, tol_neg)
    bad = np.nonzero(lowest >= -tol_neg)[0]
    first = float(t[mask][bad[0]]) if len(bad) else None
    return EternalReport(len(bad) == 0, t_min, float(t[mask][-1]), int(lowest.size),
                         float(lowest.max()), first, tol_neg)
