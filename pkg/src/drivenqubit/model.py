"""Driven spin-boson model: Hamiltonian, spectral density and bath expansion.

Units: hbar = 1 and all energies/frequencies are measured in units of the
tunnelling amplitude ``delta``.  The bath couples through sigma_z and has the
Drude-cut Ohmic spectral density

    J(w) = (eta / pi) * w_c * w / (w_c**2 + w**2).

The bath correlation function used throughout is

    C_B(t) = (1/pi) * int_0^inf dw J(w) [coth(beta w / 2) cos(w t) - i sin(w t)],

which is expanded as a Drude pole plus Matsubara exponentials.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import integrate

from .errors import ConfigError, InsufficientMatsubaraError

__all__ = [
    "PAULI",
    "PAULI_LABELS",
    "TwoLevelOperator",
    "ModelParams",
    "BathExpansion",
    "drive_bias",
    "system_hamiltonian",
    "spectral_density",
    "bath_expansion",
    "matsubara_tail_weight",
    "bath_correlation_quadrature",
    "discretize_bath",
    "parse_key_values",
    "format_key_values",
]

PAULI = np.array(
    [
        [[1, 0], [0, 1]],
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)
PAULI.setflags(write=False)
PAULI_LABELS = ("0", "x", "y", "z")

# Relative size of the Markovian tail allowed before more Matsubara terms
# are demanded.
_MAX_TAIL_FRACTION = 0.1


@dataclass(frozen=True)
class TwoLevelOperator:
    """A 2x2 complex matrix with an optional Hermiticity guarantee."""

    matrix: np.ndarray
    hermitian: bool = False

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex)
        if m.shape != (2, 2):
            raise ConfigError(f"expected a 2x2 matrix, got shape {m.shape}")
        if self.hermitian and np.max(np.abs(m - m.conj().T)) >= 1e-12:
            raise ConfigError("operator flagged hermitian is not Hermitian")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)

    @property
    def dagger(self) -> "TwoLevelOperator":
        return TwoLevelOperator(self.matrix.conj().T, self.hermitian)

    def trace(self) -> complex:
        return complex(np.trace(self.matrix))

    def pauli_components(self) -> np.ndarray:
        """Coefficients a_mu with A = sum_mu a_mu sigma_mu."""
        return 0.5 * np.einsum("mij,ji->m", PAULI, self.matrix)


@dataclass(frozen=True)
class ModelParams:
    """Physical constants of the driven spin-boson model."""

    delta: float = 1.0
    eps0: float = 0.0
    epsd: float = 0.0
    omega_drive: float = 0.0
    eta: float = 0.0
    omega_c: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{f.name} must be a real number, got {value!r}")
            if not math.isfinite(value):
                raise ConfigError(f"{f.name} must be finite, got {value!r}")
            object.__setattr__(self, f.name, float(value))
        if self.delta < 0:
            raise ConfigError("delta must be non-negative")
        if self.epsd < 0:
            raise ConfigError("epsd must be non-negative")
        if self.omega_drive < 0:
            raise ConfigError("omega must be non-negative")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if self.omega_c <= 0:
            raise ConfigError("omega_c must be positive")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")

    @property
    def driven(self) -> bool:
        return self.epsd != 0.0

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    # key=value serialization -------------------------------------------------
    _CONFIG_KEYS = (
        ("delta", "delta"),
        ("eps0", "eps0"),
        ("epsd", "epsd"),
        ("omega", "omega_drive"),
        ("eta", "eta"),
        ("omega_c", "omega_c"),
        ("beta", "beta"),
    )

    @classmethod
    def config_keys(cls) -> tuple[str, ...]:
        return tuple(k for k, _ in cls._CONFIG_KEYS)

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "ModelParams":
        kwargs = {}
        for key, attr in cls._CONFIG_KEYS:
            if key in mapping:
                try:
                    kwargs[attr] = float(mapping[key])
                except ValueError:
                    raise ConfigError(f"{key}: cannot parse {mapping[key]!r} as a number") from None
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, str]:
        return {key: repr(getattr(self, attr)) for key, attr in self._CONFIG_KEYS}

    @classmethod
    def from_config(cls, text: str) -> "ModelParams":
        mapping = parse_key_values(text)
        unknown = set(mapping) - set(cls.config_keys())
        if unknown:
            raise ConfigError(f"unknown model key(s): {', '.join(sorted(unknown))}")
        return cls.from_mapping(mapping)

    def to_config(self) -> str:
        return format_key_values(self.to_mapping())


def parse_key_values(text: str) -> dict[str, str]:
    """Parse the flat ``key = value`` grammar.

    One assignment per line; ``#`` starts a comment; blank lines are ignored;
    keys are case-sensitive identifiers and may appear only once.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key.replace("_", "").isalnum():
            raise ConfigError(f"line {lineno}: invalid key {key!r}")
        if not value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_key_values(mapping: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())


def drive_bias(t, p: ModelParams):
    """epsilon(t) = eps0 + epsd cos(Omega t); vectorized over ``t``."""
    return p.eps0 + p.epsd * np.cos(p.omega_drive * np.asarray(t, dtype=float))


def system_hamiltonian(t: float, p: ModelParams) -> TwoLevelOperator:
    eps = float(drive_bias(t, p))
    return TwoLevelOperator(p.delta * PAULI[1] + eps * PAULI[3], hermitian=True)


def spectral_density(omega, p: ModelParams):
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0):
        raise ConfigError("spectral density is defined for omega >= 0")
    return p.eta / np.pi * p.omega_c * omega / (p.omega_c**2 + omega**2)


@dataclass(frozen=True)
class BathExpansion:
    """C_B(t) ~ sum_k c_k exp(-nu_k t) + 2 * delta_term * delta(t).

    Term 0 is the Drude pole (nu_0 = omega_c, complex amplitude); terms
    1..K are Matsubara poles with real amplitudes.  ``delta_term`` is the
    integrated weight of the discarded Matsubara tail, which the hierarchy
    can reinstate as a Markovian double commutator.
    """

    coefficients: np.ndarray
    rates: np.ndarray
    n_matsubara: int
    delta_term: float
    closure: bool = True
    params: ModelParams | None = field(default=None, compare=False)

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=complex)
        nu = np.array(self.rates, dtype=float)
        if c.shape != nu.shape or c.ndim != 1:
            raise ConfigError("coefficients and rates must be 1-D arrays of equal length")
        if np.any(nu <= 0):
            raise ConfigError("decay rates must be positive")
        c.setflags(write=False)
        nu.setflags(write=False)
        object.__setattr__(self, "coefficients", c)
        object.__setattr__(self, "rates", nu)

    @property
    def terms(self) -> list[tuple[complex, float]]:
        return list(zip(self.coefficients.tolist(), self.rates.tolist()))

    @property
    def n_terms(self) -> int:
        return len(self.rates)

    @property
    def tail_weight(self) -> float:
        """Markovian weight applied by the hierarchy (0 if closure is off)."""
        return self.delta_term if self.closure else 0.0

    def correlation(self, t) -> np.ndarray:
        """Sum of the retained exponentials (the delta tail is not included)."""
        t = np.asarray(t, dtype=float)
        return np.exp(-np.multiply.outer(t, self.rates)) @ self.coefficients


def _tail_sum_all(p: ModelParams) -> float:
    """sum_{k>=1} c_k / nu_k in closed form."""
    a = p.beta * p.omega_c / (2 * np.pi)
    if a < 1e-6:
        s = np.pi**2 / 6 + np.pi**4 * a**2 / 90
    else:
        s = 1 / (2 * a**2) - np.pi / (2 * a * np.tan(np.pi * a))
    return 2 * p.eta * p.omega_c / (np.pi * p.beta) * (p.beta / (2 * np.pi)) ** 2 * s


def _matsubara_rates(p: ModelParams, n: int) -> np.ndarray:
    return 2 * np.pi * np.arange(1, n + 1) / p.beta


def _matsubara_amplitudes(p: ModelParams, nu: np.ndarray) -> np.ndarray:
    return 2 * p.eta * p.omega_c / (np.pi * p.beta) * nu / (nu**2 - p.omega_c**2)


def matsubara_tail_weight(p: ModelParams, n_matsubara: int) -> float:
    """Integrated weight sum_{k>K} c_k / nu_k of the dropped Matsubara terms."""
    nu = _matsubara_rates(p, n_matsubara)
    kept = np.sum(_matsubara_amplitudes(p, nu) / nu) if n_matsubara else 0.0
    return float(_tail_sum_all(p) - kept)


def bath_expansion(
    p: ModelParams,
    n_matsubara: int,
    closure: bool = True,
    validate: bool = False,
) -> BathExpansion:
    """Drude pole plus ``n_matsubara`` Matsubara terms for the model bath.

    Parameters
    ----------
    p : ModelParams
    n_matsubara : int
        Number K of explicit Matsubara exponentials.
    closure : bool
        Whether the hierarchy should add the dropped tail back as a
        Markovian term.  The tail weight is reported either way.
    validate : bool
        Compare the expansion with direct quadrature (slow).

    Raises
    ------
    InsufficientMatsubaraError
        If the dropped tail carries more than 10% of the Drude weight
        |c_0| / nu_0.
    """
    if n_matsubara < 0 or int(n_matsubara) != n_matsubara:
        raise ConfigError("n_matsubara must be a non-negative integer")
    n_matsubara = int(n_matsubara)
    nu_m = _matsubara_rates(p, n_matsubara)
    if np.any(np.isclose(nu_m, p.omega_c, rtol=1e-9)):
        raise ConfigError("Matsubara frequency coincides with omega_c; pole expansion is singular")

    half = p.beta * p.omega_c / 2
    c0 = p.eta * p.omega_c / (2 * np.pi) * (1 / np.tan(half) - 1j)
    coeffs = np.concatenate([[c0], _matsubara_amplitudes(p, nu_m)])
    rates = np.concatenate([[p.omega_c], nu_m])
    tail = matsubara_tail_weight(p, n_matsubara) if p.eta > 0 else 0.0

    if p.eta > 0 and abs(tail) * p.omega_c > _MAX_TAIL_FRACTION * abs(c0):
        raise InsufficientMatsubaraError(
            f"Matsubara tail weight {tail:.3g} exceeds {_MAX_TAIL_FRACTION:.0%} of the "
            f"Drude weight {abs(c0) / p.omega_c:.3g} at K={n_matsubara}; increase n_matsubara"
        )
    bath = BathExpansion(coeffs, rates, n_matsubara, tail, closure, p)
    if validate and p.eta > 0:
        _validate_expansion(bath, p)
    return bath


def _validate_expansion(bath: BathExpansion, p: ModelParams, rtol: float = 1e-3) -> None:
    # Below ~5/nu_{K+1} the dropped exponentials are not yet negligible and
    # the exact function diverges logarithmically at t -> 0.
    t_lo = 5 * p.beta / (2 * np.pi * (bath.n_matsubara + 1))
    ts = np.linspace(t_lo, 10 / p.omega_c, 25)
    ref = bath_correlation_quadrature(p, ts)
    err = np.abs(bath.correlation(ts) - ref) / np.abs(ref)
    if np.max(err) > rtol:
        raise ConfigError(f"bath expansion deviates from quadrature by {np.max(err):.2e}")


def bath_correlation_quadrature(p: ModelParams, t) -> np.ndarray:
    """C_B(t) for t > 0 by adaptive Fourier quadrature of J(w)."""
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(ts <= 0):
        raise ConfigError("quadrature reference requires t > 0 (log divergence at t = 0)")

    def sym(w):
        if w == 0.0:
            return 2 * p.eta / (np.pi * p.beta * p.omega_c)
        return float(spectral_density(w, p)) / np.tanh(p.beta * w / 2)

    def anti(w):
        return float(spectral_density(w, p))

    out = np.empty(ts.shape, dtype=complex)
    for i, ti in enumerate(ts):
        re = integrate.quad(sym, 0, np.inf, weight="cos", wvar=ti, limlst=200)[0]
        im = integrate.quad(anti, 0, np.inf, weight="sin", wvar=ti, limlst=200)[0]
        out[i] = (re - 1j * im) / np.pi
    return out if np.ndim(t) else out[0]


def discretize_bath(p: ModelParams, n_modes: int, omega_max: float | None = None):
    """Sample ``n_modes`` oscillators representing J on (0, omega_max].

    Frequencies are placed at equal quantiles of J(w)/w, so every mode
    carries the same share of the reorganization integral.  Returns
    ``(omegas, weights)`` with sum_a weights_a delta(w - omegas_a) ~ J(w)/pi,
    i.e. weights_a = c_a**2 / (2 m_a w_a) for coupling sigma_z * sum c_a x_a.
    """
    if n_modes < 1:
        raise ConfigError("n_modes must be positive")
    if omega_max is None:
        omega_max = 10 * p.omega_c
    theta_max = np.arctan(omega_max / p.omega_c)
    theta = theta_max * (np.arange(n_modes) + 0.5) / n_modes
    omegas = p.omega_c * np.tan(theta)
    weights = p.eta * theta_max / (np.pi**2 * n_modes) * omegas
    return omegas, weights
