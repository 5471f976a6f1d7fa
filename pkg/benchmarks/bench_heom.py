"""Compare the compiled and numpy kernels on representative workloads.

    python3 benchmarks/bench_heom.py [--repeat 3]

Each case runs both backends on identical inputs, checks that the results
agree, and prints the best wall time of ``--repeat`` runs.
"""
import argparse
import time

import numpy as np

from drivenqubit import _backend
from drivenqubit.heom import HeomConfig, build_generator
from drivenqubit.model import PAULI, ModelParams, bath_expansion


def _best(fn, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def rk4_case(L, K, n_steps):
    p = ModelParams(delta=1, eps0=0, epsd=1, omega_drive=1, eta=1, beta=0.3)
    cfg = HeomConfig(max_tier=L, n_matsubara=K, dt=0.001, t_final=n_steps * 0.001)
    gen = build_generator(p, bath_expansion(p, K), cfg)
    A = gen.A
    y0 = np.zeros((gen.dim, 4), dtype=complex)
    y0[:4] = (0.5 * PAULI).reshape(4, 4).T
    grid = cfg.dt * np.arange(n_steps + 1)
    eps_full = np.ascontiguousarray(np.cos(grid))
    eps_half = np.ascontiguousarray(np.cos(grid[:-1] + 0.5 * cfg.dt))
    args = (A.indptr.astype(np.int32), A.indices.astype(np.int32), A.data.astype(complex),
            gen.bdiag, y0, eps_full, eps_half, cfg.dt, n_steps, 10, 4)

    def run(core):
        return lambda: core.rk4_csr(*args)[0]

    return f"rk4_csr L={L} K={K} ({gen.dim // 4} ADOs, {n_steps} steps)", run


def volterra_case(n):
    rng = np.random.default_rng(0)
    s = 0.01 * np.arange(n)
    k1 = np.ascontiguousarray(rng.standard_normal((n, 4, 4)) * np.exp(-s)[:, None, None])
    k3 = np.ascontiguousarray(rng.standard_normal((n, 4, 4)) * np.exp(-s)[:, None, None])
    lhs_inv = np.ascontiguousarray(np.linalg.inv(np.eye(4) - 0.005 * k3[0]))

    def run(core):
        return lambda: core.volterra(k1, k3, lhs_inv, 0.01)

    return f"volterra ({n} lags)", run


def conv_case(n):
    rng = np.random.default_rng(1)
    a = np.ascontiguousarray(rng.standard_normal((n, 4, 4)))
    b = np.ascontiguousarray(rng.standard_normal((n, 4, 4)))

    def run(core):
        return lambda: core.conv_trapz(a, b, 0.01)

    return f"conv_trapz ({n} lags)", run


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)
    try:
        fast = _backend.get("cython")
    except ImportError:
        print("compiled extension not built; nothing to compare")
        return 1
    slow = _backend.get("python")
    cases = [rk4_case(4, 1, 2000), rk4_case(10, 1, 2000), rk4_case(16, 2, 500),
             volterra_case(1000), conv_case(1000)]
    print(f"{'case':48s} {'cython [s]':>11s} {'python [s]':>11s} {'speedup':>8s}")
    for name, run in cases:
        tf, of = _best(run(fast), args.repeat)
        ts, os_ = _best(run(slow), args.repeat)
        err = float(np.max(np.abs(of - os_)) / max(1.0, np.max(np.abs(os_))))
        flag = "" if err < 1e-10 else f"  MISMATCH {err:.2e}"
        print(f"{name:48s} {tf:11.4f} {ts:11.4f} {ts / tf:8.1f}{flag}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
