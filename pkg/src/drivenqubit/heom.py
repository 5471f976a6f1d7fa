"""Hierarchical equations of motion for the sigma_z-coupled Drude bath.

With C_B(t) = sum_k c_k exp(-nu_k t) and scaled auxiliary operators
rho_n / sqrt(prod_k n_k! |c_k|^n_k), every operator obeys

    d rho_n/dt = -i[H_s(t), rho_n] - (n.nu) rho_n - D [Q, [Q, rho_n]]
                 - i sum_k sqrt((n_k + 1)|c_k|) [Q, rho_{n+e_k}]
                 - i sum_k sqrt(n_k / |c_k|) (c_k Q rho_{n-e_k} - c_k^* rho_{n-e_k} Q)

with Q = sigma_z and D the Markovian weight of the dropped Matsubara tail.
The equations are linear, so the generator is assembled once as a sparse
matrix acting on the row-major vectorized operators; the drive only enters
a diagonal term proportional to eps(t).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from . import _backend
from .errors import ConfigError, HeomDivergenceError, MemoryBudgetError
from .model import PAULI, BathExpansion, ModelParams, TwoLevelOperator, bath_expansion, drive_bias

__all__ = [
    "HierarchyIndex",
    "HeomConfig",
    "AdoState",
    "InitialCondition",
    "SystemTrajectory",
    "HeomGenerator",
    "ConvergenceReport",
    "enumerate_hierarchy",
    "build_generator",
    "heom_rhs",
    "propagate",
    "propagate_operators",
    "convergence_scan",
]

TERMINATORS = ("drop", "markovian_closure")

# RK4 is stable on the negative real axis up to |h * lambda| ~ 2.785.
_RK4_REAL_STABILITY = 2.5

# sigma_z commutator and the per-element factors (z_a, z_b) for the row-major
# vectorized 2x2 operator (00, 01, 10, 11).
_ZA = np.array([1.0, 1.0, -1.0, -1.0])
_ZB = np.array([1.0, -1.0, 1.0, -1.0])
_QCOMM = _ZA - _ZB


@dataclass(frozen=True, order=True)
class HierarchyIndex:
    occupations: tuple[int, ...]

    @property
    def tier(self) -> int:
        return sum(self.occupations)


@dataclass(frozen=True)
class HeomConfig:
    """Truncation and integration settings.

    ``terminator`` closes the hierarchy at tier L ("drop" discards tier L+1,
    "markovian_closure" eliminates it adiabatically).  ``tail_closure``
    controls whether the dropped Matsubara tail is restored as a Markovian
    double commutator.  ``stride`` records every stride-th RK4 step.
    """

    max_tier: int = 10
    n_matsubara: int = 1
    dt: float = 0.01
    t_final: float = 10.0
    terminator: str = "drop"
    tail_closure: bool = True
    stride: int = 1
    max_ados: int = 250_000

    def __post_init__(self):
        if int(self.max_tier) != self.max_tier or self.max_tier < 1:
            raise ConfigError("max_tier must be an integer >= 1")
        if int(self.n_matsubara) != self.n_matsubara or self.n_matsubara < 0:
            raise ConfigError("n_matsubara must be an integer >= 0")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError("dt must be positive")
        if not (self.t_final >= self.dt):
            raise ConfigError("t_final must be >= dt")
        if self.terminator not in TERMINATORS:
            raise ConfigError(f"terminator must be one of {TERMINATORS}")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ConfigError("stride must be a positive integer")
        object.__setattr__(self, "max_tier", int(self.max_tier))
        object.__setattr__(self, "n_matsubara", int(self.n_matsubara))
        object.__setattr__(self, "stride", int(self.stride))
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "t_final", float(self.t_final))

    @property
    def n_steps(self) -> int:
        n = int(round(self.t_final / self.dt))
        return n - n % self.stride

    @property
    def output_dt(self) -> float:
        return self.dt * self.stride

    def with_(self, **changes) -> "HeomConfig":
        return replace(self, **changes)

    _INT_KEYS = ("max_tier", "n_matsubara", "stride", "max_ados")
    _FLOAT_KEYS = ("dt", "t_final")

    @classmethod
    def config_keys(cls) -> tuple[str, ...]:
        return cls._INT_KEYS + cls._FLOAT_KEYS + ("terminator", "tail_closure")

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "HeomConfig":
        kwargs: dict = {}
        for key in cls._INT_KEYS:
            if key in mapping:
                try:
                    kwargs[key] = int(mapping[key])
                except ValueError:
                    raise ConfigError(f"{key}: expected an integer, got {mapping[key]!r}") from None
        for key in cls._FLOAT_KEYS:
            if key in mapping:
                try:
                    kwargs[key] = float(mapping[key])
                except ValueError:
                    raise ConfigError(f"{key}: expected a number, got {mapping[key]!r}") from None
        if "terminator" in mapping:
            kwargs["terminator"] = mapping["terminator"]
        if "tail_closure" in mapping:
            value = mapping["tail_closure"].lower()
            if value not in ("true", "false"):
                raise ConfigError(f"tail_closure: expected true/false, got {mapping['tail_closure']!r}")
            kwargs["tail_closure"] = value == "true"
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, str]:
        out = {key: str(getattr(self, key)) for key in self._INT_KEYS}
        out.update({key: repr(getattr(self, key)) for key in self._FLOAT_KEYS})
        out["terminator"] = self.terminator
        out["tail_closure"] = "true" if self.tail_closure else "false"
        return out


@dataclass(frozen=True)
class InitialCondition:
    """Tier-0 operator at the initial time; all deeper tiers start at zero."""

    system_operator: TwoLevelOperator

    @classmethod
    def pauli(cls, mu: int) -> "InitialCondition":
        """The operator sigma_mu / 2 used for the correlation matrix."""
        return cls(TwoLevelOperator(0.5 * PAULI[mu], hermitian=True))

    @classmethod
    def from_bloch(cls, v) -> "InitialCondition":
        v = np.asarray(v, dtype=float)
        if v.shape == (3,):
            v = np.concatenate([[1.0], v])
        return cls(TwoLevelOperator(0.5 * np.einsum("m,mij->ij", v, PAULI), hermitian=True))


@dataclass
class AdoState:
    time: float
    ados: np.ndarray
    hierarchy: "Hierarchy"

    @property
    def system(self) -> np.ndarray:
        return self.ados[0]


@dataclass(frozen=True)
class SystemTrajectory:
    times: np.ndarray
    states: np.ndarray

    def expectation(self, mu: int) -> np.ndarray:
        """tr[rho(t) sigma_mu] along the trajectory."""
        return np.einsum("tij,ji->t", self.states, PAULI[mu])


class Hierarchy:
    """Lexicographically ordered multi-indices with O(1) neighbour lookup."""

    def __init__(self, n_terms: int, max_tier: int):
        self.n_terms = n_terms
        self.max_tier = max_tier
        self.occupations = _enumerate(n_terms, max_tier)
        self.tiers = self.occupations.sum(axis=1)
        self._radix = max_tier + 2
        self._weights = self._radix ** np.arange(n_terms - 1, -1, -1, dtype=np.int64)
        keys = self.occupations @ self._weights
        self._order = np.argsort(keys, kind="stable")
        self._sorted_keys = keys[self._order]

    def __len__(self) -> int:
        return len(self.occupations)

    def indices(self) -> list[HierarchyIndex]:
        return [HierarchyIndex(tuple(int(x) for x in row)) for row in self.occupations]

    def lookup(self, occ: np.ndarray) -> np.ndarray:
        """Positions of the given occupation rows (-1 where absent)."""
        occ = np.atleast_2d(occ)
        keys = occ @ self._weights
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.clip(pos, 0, len(self._sorted_keys) - 1)
        found = (self._sorted_keys[pos] == keys) & (occ.min(axis=1) >= 0) & (occ.sum(axis=1) <= self.max_tier)
        return np.where(found, self._order[pos], -1)


def _enumerate(n_terms: int, max_tier: int) -> np.ndarray:
    rows: list[tuple[int, ...]] = []

    def rec(prefix: tuple[int, ...], remaining: int):
        if len(prefix) == n_terms:
            rows.append(prefix)
            return
        for k in range(remaining + 1):
            rec(prefix + (k,), remaining - k)

    rec((), max_tier)
    return np.array(rows, dtype=np.int64).reshape(-1, n_terms)


def hierarchy_size(n_terms: int, max_tier: int) -> int:
    return math.comb(max_tier + n_terms, n_terms)


def enumerate_hierarchy(cfg: HeomConfig, bath: BathExpansion | None = None) -> list[HierarchyIndex]:
    """All multi-indices of tier <= L over the K+1 exponential terms."""
    n_terms = bath.n_terms if bath is not None else cfg.n_matsubara + 1
    return _checked_hierarchy(n_terms, cfg).indices()


def _checked_hierarchy(n_terms: int, cfg: HeomConfig) -> Hierarchy:
    count = hierarchy_size(n_terms, cfg.max_tier)
    if count > cfg.max_ados:
        raise MemoryBudgetError(
            f"hierarchy with L={cfg.max_tier} and {n_terms} terms has {count} operators, "
            f"budget is {cfg.max_ados}"
        )
    return Hierarchy(n_terms, cfg.max_tier)


@dataclass
class HeomGenerator:
    """d vec/dt = A vec + eps(t) * bdiag * vec on the stacked operators."""

    A: sp.csr_matrix
    bdiag: np.ndarray
    hierarchy: Hierarchy
    max_rate: float = field(default=0.0)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def apply(self, eps: float, vec: np.ndarray) -> np.ndarray:
        return self.A @ vec + eps * (self.bdiag.reshape((-1,) + (1,) * (vec.ndim - 1)) * vec)


def build_generator(p: ModelParams, bath: BathExpansion, cfg: HeomConfig) -> HeomGenerator:
    hier = _checked_hierarchy(bath.n_terms, cfg)
    n_ado = len(hier)
    occ = hier.occupations
    c = bath.coefficients
    nu = bath.rates
    absc = np.abs(c)
    active = absc > 0

    rows, cols, vals = [], [], []

    def add_block(src, dst, diag4):
        # diag4: (n, 4) diagonal entries coupling operator dst into src
        for e in range(4):
            d = diag4[:, e]
            keep = d != 0
            rows.append(4 * src[keep] + e)
            cols.append(4 * dst[keep] + e)
            vals.append(d[keep])

    # local part: -i[delta sigma_x, .] within every operator
    hx = p.delta * PAULI[1]
    eye = np.eye(2)
    local = -1j * (np.kron(hx, eye) - np.kron(eye, hx.T))
    damping = occ @ nu
    tail = bath.tail_weight
    all_idx = np.arange(n_ado)
    for a in range(4):
        for b in range(4):
            if local[a, b] != 0:
                rows.append(4 * all_idx + a)
                cols.append(4 * all_idx + b)
                vals.append(np.full(n_ado, local[a, b]))
    diag_local = -damping[:, None] - tail * (_QCOMM**2)[None, :]
    add_block(all_idx, all_idx, diag_local.astype(complex))

    down_diag = np.empty((bath.n_terms, 4), dtype=complex)
    for k in range(bath.n_terms):
        down_diag[k] = c[k] * _ZA - np.conj(c[k]) * _ZB

    for k in range(bath.n_terms):
        if not active[k]:
            continue
        ek = np.zeros(bath.n_terms, dtype=np.int64)
        ek[k] = 1
        up = hier.lookup(occ + ek)
        has_up = up >= 0
        src = all_idx[has_up]
        scale = np.sqrt((occ[has_up, k] + 1) * absc[k])
        add_block(src, up[has_up], -1j * scale[:, None] * _QCOMM[None, :])

        has_down = occ[:, k] > 0
        src = all_idx[has_down]
        dn = hier.lookup(occ[has_down] - ek)
        scale = np.sqrt(occ[has_down, k] / absc[k])
        add_block(src, dn, -1j * scale[:, None] * down_diag[k][None, :])

    if cfg.terminator == "markovian_closure":
        _add_terminator(hier, bath, add_block)

    n = 4 * n_ado
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    bdiag = np.tile(-1j * _QCOMM, n_ado).astype(complex)
    max_rate = float(np.max(damping) + 4 * abs(tail))
    return HeomGenerator(A, bdiag, hier, max_rate)


def _add_terminator(hier: Hierarchy, bath: BathExpansion, add_block) -> None:
    """Adiabatic elimination of tier L+1 (system Liouvillian neglected)."""
    occ = hier.occupations
    c, nu = bath.coefficients, bath.rates
    absc = np.abs(c)
    top = np.flatnonzero(hier.tiers == hier.max_tier)
    for k in range(bath.n_terms):
        if absc[k] == 0:
            continue
        m = occ[top].copy()
        m[:, k] += 1
        gamma_m = m @ nu
        up_scale = np.sqrt((occ[top, k] + 1) * absc[k])
        for j in range(bath.n_terms):
            if absc[j] == 0:
                continue
            back = m.copy()
            back[:, j] -= 1
            ok = back[:, j] >= 0
            if not ok.any():
                continue
            dst = hier.lookup(back[ok])
            coef = -up_scale[ok] * np.sqrt(m[ok, j] / absc[j]) / gamma_m[ok]
            diag = coef[:, None] * (_QCOMM * (c[j] * _ZA - np.conj(c[j]) * _ZB))[None, :]
            add_block(top[ok], dst, diag)


def _check_stability(gen: HeomGenerator, cfg: HeomConfig) -> None:
    if cfg.dt * gen.max_rate > _RK4_REAL_STABILITY:
        raise ConfigError(
            f"dt={cfg.dt} is outside the RK4 stability region for the deepest hierarchy "
            f"damping rate {gen.max_rate:.4g} (need dt < {_RK4_REAL_STABILITY / gen.max_rate:.3g})"
        )


def heom_rhs(t: float, s: AdoState, p: ModelParams, bath: BathExpansion, cfg: HeomConfig,
             generator: HeomGenerator | None = None) -> AdoState:
    """Time derivative of every auxiliary operator at time ``t``."""
    gen = generator if generator is not None else build_generator(p, bath, cfg)
    if s.ados.shape != (len(gen.hierarchy), 2, 2):
        raise ValueError("state does not match the hierarchy layout")
    vec = s.ados.reshape(-1)
    d = gen.apply(float(drive_bias(t, p)), vec)
    return AdoState(t, d.reshape(-1, 2, 2), gen.hierarchy)


def propagate_operators(
    operators: Sequence,
    p: ModelParams,
    bath: BathExpansion,
    cfg: HeomConfig,
    t0: float = 0.0,
    generator: HeomGenerator | None = None,
    backend: str | None = None,
):
    """Propagate several tier-0 initial operators together.

    Returns ``(times, states)`` with ``states[t, j]`` the tier-0 operator of
    the j-th initial condition.  Times are absolute (start at ``t0``).
    """
    gen = generator if generator is not None else build_generator(p, bath, cfg)
    _check_stability(gen, cfg)
    ops = np.array([np.asarray(op, dtype=complex) for op in operators])
    if ops.ndim != 3 or ops.shape[1:] != (2, 2):
        raise ValueError("initial operators must be 2x2 matrices")
    m = len(ops)
    y0 = np.zeros((gen.dim, m), dtype=complex)
    y0[:4] = ops.reshape(m, 4).T

    n_steps, h = cfg.n_steps, cfg.dt
    grid = t0 + h * np.arange(n_steps + 1)
    eps_full = np.ascontiguousarray(drive_bias(grid, p), dtype=float)
    eps_half = np.ascontiguousarray(drive_bias(grid[:-1] + 0.5 * h, p), dtype=float)
    core = _backend.core if backend is None else _backend.get(backend)
    A = gen.A
    record, bad_step, bad_row = core.rk4_csr(
        A.indptr.astype(np.int32), A.indices.astype(np.int32), A.data.astype(complex),
        gen.bdiag, y0, eps_full, eps_half, h, n_steps, cfg.stride, 4,
    )
    if bad_step >= 0:
        tier = int(gen.hierarchy.tiers[bad_row // 4])
        t_bad = t0 + bad_step * h
        raise HeomDivergenceError(
            f"non-finite auxiliary operator at tier {tier} (t={t_bad:.6g})", tier=tier, time=t_bad
        )
    times = t0 + cfg.output_dt * np.arange(record.shape[0])
    states = record.transpose(0, 2, 1).reshape(-1, m, 2, 2)
    return times, states


def propagate(ic: InitialCondition, p: ModelParams, bath: BathExpansion, cfg: HeomConfig,
              t0: float = 0.0, backend: str | None = None) -> SystemTrajectory:
    """RK4 trajectory of the reduced operator for one initial condition."""
    times, states = propagate_operators([ic.system_operator], p, bath, cfg, t0=t0, backend=backend)
    return SystemTrajectory(times, states[:, 0])


@dataclass(frozen=True)
class ConvergenceReport:
    settings: tuple[tuple[int, int], ...]
    deviations: tuple[float, ...]
    tolerance: float

    @property
    def converged(self) -> tuple[bool, ...]:
        return tuple(d < self.tolerance for d in self.deviations)

    @property
    def first_converged(self) -> tuple[int, int] | None:
        for setting, ok in zip(self.settings, self.converged):
            if ok:
                return setting
        return None

    def rows(self):
        for (a, b), d in zip(zip(self.settings[:-1], self.settings[1:]), self.deviations):
            yield {"L": a[0], "K": a[1], "L_next": b[0], "K_next": b[1],
                   "deviation": d, "converged": d < self.tolerance}


def convergence_scan(
    ic: InitialCondition,
    p: ModelParams,
    settings: Iterable[tuple[int, int]],
    cfg: HeomConfig,
    tolerance: float = 1e-6,
) -> ConvergenceReport:
    """Max-over-time tier-0 deviation between successive (L, K) settings.

    ``cfg`` supplies the time grid and terminator; its L and K are replaced
    by each setting in turn.
    """
    settings = tuple((int(L), int(K)) for L, K in settings)
    cache: dict[tuple[int, int], np.ndarray] = {}

    def run(setting):
        if setting not in cache:
            L, K = setting
            c = cfg.with_(max_tier=L, n_matsubara=K)
            bath = bath_expansion(p, K, closure=cfg.tail_closure)
            cache[setting] = propagate(ic, p, bath, c).states
        return cache[setting]

    deviations = []
    for a, b in zip(settings[:-1], settings[1:]):
        deviations.append(float(np.max(np.abs(run(a) - run(b)))))
    return ConvergenceReport(settings, tuple(deviations), tolerance)
