"""Spin time-correlation matrix and Bloch-vector propagation.

The correlation matrix C_{mu nu}(t) = tr[rho^(mu)(t) sigma_nu] is obtained by
propagating the four operators sigma_mu / 2 through the hierarchy.  Its
transpose maps an initial Bloch vector (v_0 = 1, v_x, v_y, v_z) onto the
Bloch vector at time t, so a single StcfTrajectory carries the whole
dynamical map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, ConsistencyError, HeomDivergenceError
from .heom import HeomConfig, InitialCondition, build_generator, propagate_operators
from .io import read_csv, write_csv, write_json
from .model import PAULI, PAULI_LABELS, ModelParams, bath_expansion

__all__ = [
    "StcfTrajectory",
    "BlochVector",
    "StationarityReport",
    "WashoutReport",
    "STCF_COLUMNS",
    "compute_stcf",
    "two_time_stcf",
    "bloch_propagate",
    "stationarity_check",
    "washout_check",
    "read_stcf_csv",
]

STCF_COLUMNS = tuple(f"C_{a}{b}" for a in PAULI_LABELS for b in PAULI_LABELS)
IMAG_TOLERANCE = 1e-8


@dataclass(frozen=True)
class StcfTrajectory:
    """C_{mu nu}(t) on a uniform grid of absolute times starting at ``start_time``.

    Attributes
    ----------
    t_grid : ndarray, shape (n,)
        Absolute times; ``t_grid[0] == start_time``.
    c : ndarray, shape (n, 4, 4)
        Real correlation matrices.
    params, config
        Provenance; ``None`` for externally supplied data.
    imag_residue : float
        Largest imaginary part discarded when assembling ``c``.
    """

    t_grid: np.ndarray
    c: np.ndarray
    params: ModelParams | None = None
    config: HeomConfig | None = None
    start_time: float = 0.0
    imag_residue: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.t_grid, dtype=float)
        c = np.asarray(self.c, dtype=float)
        if t.ndim != 1 or len(t) < 2:
            raise ConfigError("t_grid needs at least two points")
        if c.shape != (len(t), 4, 4):
            raise ConfigError(f"c must have shape ({len(t)}, 4, 4), got {c.shape}")
        steps = np.diff(t)
        if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(1.0, abs(t[-1])):
            raise ConfigError("t_grid must be uniform and increasing")
        t.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "t_grid", t)
        object.__setattr__(self, "c", c)

    @property
    def dt(self) -> float:
        return (self.t_grid[-1] - self.t_grid[0]) / (len(self.t_grid) - 1)

    @property
    def lags(self) -> np.ndarray:
        """Times measured from the start of the propagation."""
        return self.t_grid - self.start_time

    def __len__(self) -> int:
        return len(self.t_grid)

    def index_of(self, t: float) -> int:
        """Grid index of time ``t``; off-grid times are rejected."""
        x = (t - self.t_grid[0]) / self.dt
        i = int(round(x))
        if i < 0 or i >= len(self.t_grid) or abs(x - i) > 1e-6:
            raise ConfigError(f"t={t} is not on the trajectory grid")
        return i

    def window(self, t_max: float) -> "StcfTrajectory":
        """Prefix of the trajectory up to (and including) absolute time ``t_max``."""
        n = int(np.searchsorted(self.t_grid, t_max + 1e-9 * self.dt, side="right"))
        if n < 2:
            raise ConfigError("window keeps fewer than two points")
        return StcfTrajectory(self.t_grid[:n], self.c[:n], self.params, self.config,
                              self.start_time, self.imag_residue)

    def metadata(self) -> dict:
        return {
            "version": __version__,
            "start_time": self.start_time,
            "n_points": len(self.t_grid),
            "dt": self.dt,
            "imag_residue": self.imag_residue,
            "model": None if self.params is None else self.params.to_mapping(),
            "heom": None if self.config is None else self.config.to_mapping(),
        }

    def to_csv(self, path, sidecar: bool = True) -> list[Path]:
        """Write ``t, C_00 ... C_zz``; optionally a ``.json`` metadata sidecar."""
        path = Path(path)
        flat = self.c.reshape(len(self.t_grid), 16)
        written = [write_csv(path, ("t",) + STCF_COLUMNS, [self.t_grid, *flat.T])]
        if sidecar:
            written.append(write_json(path.with_suffix(".json"), self.metadata()))
        return written


def read_stcf_csv(path, start_time: float | None = None) -> StcfTrajectory:
    """Load the 17-column correlation CSV (from this package or elsewhere)."""
    header, data = read_csv(path)
    if tuple(header) != ("t",) + STCF_COLUMNS:
        raise ConfigError(f"{path}: unexpected header {header}")
    t = data[:, 0]
    return StcfTrajectory(t, data[:, 1:].reshape(-1, 4, 4),
                          start_time=float(t[0]) if start_time is None else start_time)


@dataclass(frozen=True)
class BlochVector:
    """Pauli coefficients (v_0, v_x, v_y, v_z) of 2 rho; v_0 = 1."""

    v: np.ndarray

    def __post_init__(self):
        v = np.array(self.v, dtype=float)
        if v.shape == (3,):
            v = np.concatenate([[1.0], v])
        if v.shape != (4,):
            raise ConfigError("a Bloch vector has 3 or 4 components")
        if abs(v[0] - 1.0) > 1e-9:
            raise ConfigError(f"v_0 must be 1 for a normalized state, got {v[0]}")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    @property
    def spatial(self) -> np.ndarray:
        return self.v[1:]

    @property
    def is_physical(self) -> bool:
        return float(np.linalg.norm(self.spatial)) <= 1.0 + 1e-9

    def density_matrix(self) -> np.ndarray:
        return 0.5 * np.einsum("m,mij->ij", self.v, PAULI)


def _assemble(states: np.ndarray) -> tuple[np.ndarray, float]:
    """C_{mu nu} = tr[rho^(mu) sigma_nu] from states[t, mu]."""
    c = np.einsum("tmij,nji->tmn", states, PAULI)
    return c.real.copy(), float(np.max(np.abs(c.imag)))


def _run(p: ModelParams, cfg: HeomConfig, t0: float, backend: str | None) -> StcfTrajectory:
    bath = bath_expansion(p, cfg.n_matsubara, closure=cfg.tail_closure)
    gen = build_generator(p, bath, cfg)
    ops = [InitialCondition.pauli(mu).system_operator for mu in range(4)]
    try:
        times, states = propagate_operators(ops, p, bath, cfg, t0=t0, generator=gen, backend=backend)
    except HeomDivergenceError as exc:
        # Locate the first offending initial operator for the report.
        for mu in range(4):
            try:
                propagate_operators([ops[mu]], p, bath, cfg, t0=t0, generator=gen, backend=backend)
            except HeomDivergenceError:
                raise HeomDivergenceError(
                    f"sigma_{PAULI_LABELS[mu]}: {exc}", tier=exc.tier, time=exc.time, component=mu
                ) from exc
        raise
    c, imag = _assemble(states)
    if imag > IMAG_TOLERANCE:
        raise ConsistencyError(f"imaginary residue {imag:.3g} in the correlation matrix")
    return StcfTrajectory(times, c, p, cfg, start_time=t0, imag_residue=imag)


def compute_stcf(p: ModelParams, cfg: HeomConfig, backend: str | None = None) -> StcfTrajectory:
    """Correlation matrix from four hierarchy propagations starting at t = 0.

    The four initial operators share one generator and are advanced together
    as four right-hand sides of the same linear system.
    """
    return _run(p, cfg, 0.0, backend)


def two_time_stcf(p: ModelParams, cfg: HeomConfig, tau: float,
                  backend: str | None = None) -> StcfTrajectory:
    """C(t, tau): propagation started at absolute time ``tau`` (drive phase Omega tau)."""
    if not (tau >= 0 and math.isfinite(tau)):
        raise ConfigError("tau must be a finite non-negative time")
    return _run(p, cfg, float(tau), backend)


def bloch_propagate(v0: BlochVector, traj: StcfTrajectory, t: float) -> BlochVector:
    """v_mu(t) = sum_nu C_{nu mu}(t) v_nu(0) at a grid time ``t``."""
    i = traj.index_of(t)
    return BlochVector(traj.c[i].T @ v0.v)


@dataclass(frozen=True)
class StationarityReport:
    window: tuple[float, float]
    max_tail: float
    row_max: tuple[float, float, float]
    tolerance: float
    passed: bool
    verdict: str


def stationarity_check(traj: StcfTrajectory, window: float | None = None,
                       tolerance: float = 0.02) -> StationarityReport:
    """Tail size of the rows i = x, y, z, which must vanish for relaxing dynamics.

    ``window`` is the tail length in time units (default: last 20% of the
    trajectory).  The default tolerance of 0.02 is calibrated for eta >= 1 at
    beta = 0.3; weaker coupling needs longer trajectories or a looser bound.
    A trajectory that keeps O(1) correlations is reported as non-ergodic.
    """
    t = traj.t_grid
    span = t[-1] - t[0]
    if window is None:
        window = 0.2 * span
    if not (0 < window <= span):
        raise ConfigError("window must lie inside the trajectory")
    mask = t >= t[-1] - window - 1e-9 * traj.dt
    tail = np.abs(traj.c[mask, 1:, :])
    row_max = tuple(float(x) for x in tail.max(axis=(0, 2)))
    max_tail = max(row_max)
    passed = max_tail < tolerance
    verdict = "stationary" if passed else ("non-ergodic" if max_tail > 0.5 else "not yet relaxed")
    return StationarityReport((float(t[-1] - window), float(t[-1])), max_tail, row_max,
                              tolerance, passed, verdict)


@dataclass(frozen=True)
class WashoutReport:
    omegas: tuple[float, ...]
    deviations: tuple[float, ...]

    @property
    def decreasing(self) -> bool:
        d = self.deviations
        return all(b < a for a, b in zip(d[:-1], d[1:]))

    def rows(self):
        for w, d in zip(self.omegas, self.deviations):
            yield {"omega": w, "deviation": d}


def washout_check(p: ModelParams, cfg: HeomConfig, omegas: Sequence[float],
                  backend: str | None = None) -> WashoutReport:
    """Distance of the driven correlation matrix from the undriven one versus Omega.

    d(Omega) = max_{t, mu, nu} |C^(Omega)(t) - C^(epsd=0)(t)|.
    """
    omegas = tuple(float(w) for w in omegas)
    if not omegas or any(w <= 0 for w in omegas) or list(omegas) != sorted(omegas):
        raise ConfigError("omegas must be positive and ascending")
    ref = compute_stcf(p.with_(epsd=0.0), cfg, backend=backend).c
    dev = []
    for w in omegas:
        c = compute_stcf(p.with_(omega_drive=w), cfg, backend=backend).c
        dev.append(float(np.max(np.abs(c - ref))))
    return WashoutReport(omegas, tuple(dev))
