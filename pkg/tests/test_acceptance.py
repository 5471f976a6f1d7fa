"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The numerical settings (hierarchy depth, time step, window) are the smallest
that resolve each quantity; they were chosen by convergence runs and are
frozen here.
"""
import json
import math
import time

import numpy as np
import pytest

from drivenqubit import cli
from drivenqubit.diagnostics import (
    blp_measure,
    canonical_decomposition,
    canonical_rates,
    damping_series,
    eternal_nm_detector,
    nv_measure,
    trace_distance_traj,
    volume_from_damping,
    volume_traj,
)
from drivenqubit.gqme import (
    KernelTrajectory,
    bm_generator,
    bm_propagate,
    bm_stationary,
    drift_matrix,
    extract_kernel,
    gqme_residual,
    kernel_timescale,
)
from drivenqubit.heom import HeomConfig, InitialCondition, convergence_scan, propagate_operators
from drivenqubit.model import PAULI, ModelParams, bath_expansion, format_key_values
from drivenqubit.stcf import BlochVector, compute_stcf, washout_check

from oracles import dephasing_exponent, stochastic_expectation, unitary_stcf

pytestmark = pytest.mark.acceptance


def auto_cfg(eta, beta, t_final=10.0, max_tier=None, dt_out=0.01):
    """K = 1 hierarchy with the largest RK4-stable step that divides dt_out."""
    L = max_tier if max_tier is not None else (10 if eta >= 1 else 5)
    top = L * 2 * math.pi / beta
    dt = next(dt_out / s for s in (1, 2, 4, 8) if top * dt_out / s < 2.4)
    return HeomConfig(max_tier=L, n_matsubara=1, dt=dt, stride=int(round(dt_out / dt)),
                      t_final=t_final)


def kernel_cfg(eta, dt_out=0.01, t_final=10.0):
    return HeomConfig(max_tier=12 if eta >= 1 else 8, n_matsubara=1, dt=dt_out / 2, stride=2,
                      t_final=t_final, tail_closure=False)


WEAK_DRIVEN = ModelParams(delta=1, eps0=1, epsd=1, omega_drive=1, eta=0.1, omega_c=1)
UNDRIVEN = ModelParams(delta=1, eps0=1, epsd=0, eta=1, omega_c=1, beta=0.3)


def test_criterion_01_unitary_limit(criterion):
    start = time.perf_counter()
    driven = ModelParams(delta=1, eps0=0.5, epsd=1, omega_drive=5, eta=0)
    cfg = HeomConfig(max_tier=1, dt=0.0005, stride=2, t_final=5)
    _, states = propagate_operators(0.5 * PAULI, driven, bath_expansion(driven, 1), cfg)
    tr = np.trace(states, axis1=2, axis2=3)
    trace_err = max(np.abs(tr[:, 0] - 1).max(), np.abs(tr[:, 1:]).max())
    herm_err = np.abs(states - states.conj().transpose(0, 1, 3, 2)).max()

    traj = compute_stcf(driven, cfg)
    c_err = np.abs(traj.c - unitary_stcf(traj.t_grid, 1, 0.5, 1, 5, substeps=10)).max()
    v = BlochVector([0.6, 0.0, 0.8])
    d = trace_distance_traj(v, BlochVector(-v.spatial), traj)
    d_err = np.abs(d - d[0]).max()
    v_err = np.abs(volume_traj(traj).v - 1).max()
    g_err = np.abs(canonical_rates(traj, richardson=True).gamma).max()

    undriven = driven.with_(epsd=0)
    kern = extract_kernel(compute_stcf(undriven, cfg), richardson=True)
    k_err = np.abs(kern.k).max()
    elapsed = time.perf_counter() - start
    ok = (trace_err < 1e-8 and herm_err < 1e-8 and c_err < 1e-6 and d_err < 1e-8
          and v_err < 1e-8 and g_err < 1e-8 and k_err < 1e-6 and elapsed < 10)
    criterion(1, ok, f"trace {trace_err:.1e} herm {herm_err:.1e} C {c_err:.1e} D {d_err:.1e} "
                     f"V {v_err:.1e} gamma {g_err:.1e} K {k_err:.1e} ({elapsed:.1f}s)")


def test_criterion_02_pure_dephasing(criterion):
    p = ModelParams(delta=0, eps0=0, epsd=0, eta=1, omega_c=1, beta=0.3)
    cfg = HeomConfig(max_tier=20, n_matsubara=2, dt=0.002, stride=5, t_final=10,
                     terminator="markovian_closure")
    start = time.perf_counter()
    traj = compute_stcf(p, cfg)
    elapsed = time.perf_counter() - start
    ts = np.arange(0.5, 10.01, 0.5)
    exact = np.exp(-np.array([dephasing_exponent(1.0, 1.0, 0.3, t) for t in ts]))
    coh = np.array([traj.c[traj.index_of(t), 1, 1] for t in ts])
    rel = np.abs(coh / exact - 1).max()

    dec = canonical_decomposition(traj.window(1.5), richardson=True)
    single = True
    for i in range(25, len(dec.t_grid), 25):
        g = dec.gamma.gamma[i]
        k = int(np.argmax(np.abs(g)))
        lz = dec.lindblad_ops[i][k].matrix
        single &= np.max(np.abs(np.delete(g, k))) < 1e-6 * abs(g[k])
        single &= abs(abs(np.trace(lz.conj().T @ PAULI[3])) / 2 - 1) < 1e-9
    criterion(2, rel < 1e-2 and single and elapsed < 60,
              f"coherence rel err {rel:.1e}, single sigma_z channel {single} (HEOM {elapsed:.1f}s)")


def test_criterion_03_heom_convergence(criterion):
    # K = 3 needs dt < 2.785 / (20 * 2 pi * 3 / 0.3); 0.00125 keeps the 0.01 output grid.
    p = ModelParams(delta=1, eps0=0, epsd=1, omega_drive=1, eta=1, omega_c=1, beta=0.3)
    cfg = HeomConfig(dt=0.00125, stride=8, t_final=10, terminator="markovian_closure")
    start = time.perf_counter()
    rep = convergence_scan(InitialCondition.pauli(3), p, [(16, 2), (20, 3)], cfg)
    elapsed = time.perf_counter() - start
    dev = rep.deviations[0]
    criterion(3, dev < 1e-6 and elapsed < 600,
              f"(16,2)->(20,3) deviation {dev:.2e} (need < 1e-6, {elapsed:.0f}s)")


def test_criterion_04_weak_coupling_oracle(criterion):
    p = ModelParams(delta=1, eps0=1, epsd=0, eta=0.1, omega_c=1, beta=0.3)
    cfg = HeomConfig(max_tier=5, n_matsubara=1, dt=0.005, stride=2, t_final=5)
    traj = compute_stcf(p, cfg)
    # <sigma_z>(t) for v0 = (1, 0, 0, 1) is row 0 plus row z of C.
    heom_z = traj.c[:, 0, 3] + traj.c[:, 3, 3]
    t, z, err = stochastic_expectation(1, 1, 0.1, 1.0, 0.3, 5.0, 0.01, 4000, 11, n_modes=80)
    np.testing.assert_allclose(t, traj.t_grid, atol=1e-12)
    dev = np.abs(z - heom_z).max()
    criterion(4, dev < 0.02, f"max |<sz>_HEOM - <sz>_F=80| = {dev:.4f} (MC stderr <= {err.max():.4f})")


RATE_SETS = [
    ("weak driven beta=0.3", WEAK_DRIVEN.with_(beta=0.3), auto_cfg(0.1, 0.3, t_final=20)),
    ("weak driven beta=1.6", WEAK_DRIVEN.with_(beta=1.6), auto_cfg(0.1, 1.6, t_final=20)),
    ("strong driven omega=2", ModelParams(delta=1, eps0=0, epsd=1, omega_drive=2, eta=1, beta=0.3),
     auto_cfg(1.0, 0.3, dt_out=0.005)),
    ("undriven eta=1", UNDRIVEN, auto_cfg(1.0, 0.3, dt_out=0.005)),
]


@pytest.fixture(scope="module")
def rate_trajs():
    return {name: compute_stcf(p, cfg) for name, p, cfg in RATE_SETS}


def test_criterion_05_trace_identity(criterion, rate_trajs):
    res = {name: canonical_rates(traj).sum_rule_residual() for name, traj in rate_trajs.items()}
    worst = max(res.values())
    criterion(5, worst < 1e-8, "max |2 sum gamma + tr Xi| " + ", ".join(
        f"{k}: {v:.1e}" for k, v in res.items()))


def test_criterion_06_volume_identity(criterion, rate_trajs):
    res = {}
    for name, traj in rate_trajs.items():
        n = len(canonical_rates(traj).t_grid)
        xi = damping_series(traj, richardson=True, n=n)
        v = volume_traj(traj).v[:n]
        res[name] = float(np.max(np.abs(volume_from_damping(traj, xi) / v - 1)))
    worst = max(res.values())
    criterion(6, worst < 1e-4, "max rel err " + ", ".join(f"{k}: {v:.1e}" for k, v in res.items()))


def test_criterion_07_volume_vs_blp(criterion):
    start = time.perf_counter()
    bad = []
    worst_nv, least_blp = 0.0, math.inf
    for eta in (0.1, 1.0):
        for beta in (0.3, 1.6):
            for omega in (0, 1, 2, 5, 10, 20):
                p = ModelParams(delta=1, eps0=0, epsd=1, omega_drive=omega, eta=eta, beta=beta)
                traj = compute_stcf(p, auto_cfg(eta, beta))
                n_v = nv_measure(volume_traj(traj))
                n_blp = blp_measure(traj, 10_000, 7).n_blp
                worst_nv = max(worst_nv, n_v)
                least_blp = min(least_blp, n_blp)
                if not (n_v == 0 and n_blp > 0):
                    bad.append((eta, beta, omega, n_v, n_blp))
    elapsed = time.perf_counter() - start
    criterion(7, not bad and elapsed < 1800,
              f"24 sets: max N_V {worst_nv:.1e}, min N_BLP {least_blp:.2e}, "
              f"failures {bad} ({elapsed:.0f}s)")


def test_criterion_08_eternal_nm(criterion, rate_trajs):
    reports = {b: eternal_nm_detector(canonical_rates(rate_trajs[f"weak driven beta={b}"]), t_min=0.5)
               for b in ("0.3", "1.6")}
    ok = all(r.eternal for r in reports.values())
    criterion(8, ok, ", ".join(
        f"beta={b}: max lowest rate {r.max_lowest_rate:.2e} on [{r.t_min}, {r.t_max:.2f}]"
        for b, r in reports.items()))


def test_criterion_09_gqme_closure(criterion):
    x = drift_matrix(UNDRIVEN)
    res = []
    for dt_out in (0.01, 0.005):
        traj = compute_stcf(UNDRIVEN, kernel_cfg(1.0, dt_out=dt_out))
        res.append(gqme_residual(traj, x, extract_kernel(traj, x)))
    ratio = res[0] / res[1]
    criterion(9, res[1] < 1e-3 and 3.5 < ratio < 4.5,
              f"residual {res[0]:.2e} (dt 0.01), {res[1]:.2e} (dt 0.005), ratio {ratio:.2f}")


def test_criterion_10_kernel_timescale(criterion):
    taus = []
    for eta in (0.1, 0.5, 1.0, 2.0):
        p = UNDRIVEN.with_(eta=eta)
        taus.append(kernel_timescale(extract_kernel(compute_stcf(p, kernel_cfg(eta)))))
    decreasing = all(b < a for a, b in zip(taus[:-1], taus[1:]))
    s = 0.001 * np.arange(40001)
    k = np.zeros((len(s), 4, 4))
    k[:, 1, 1] = np.exp(-s)
    toy = KernelTrajectory(s, k, np.zeros_like(k), k, np.zeros((4, 4)), {})
    tau_exp = kernel_timescale(toy, 0.9)
    analytic = abs(tau_exp - math.log(10)) < 1e-3
    criterion(10, decreasing and analytic,
              "tau_K(eta=0.1, 0.5, 1, 2) = " + ", ".join(f"{t:.3f}" for t in taus)
              + f"; exp kernel tau_K - ln 10 = {tau_exp - math.log(10):.1e}")


def test_criterion_11_born_markov(criterion):
    x = drift_matrix(UNDRIVEN)
    bm = bm_generator(x, extract_kernel(compute_stcf(UNDRIVEN, kernel_cfg(1.0)), x))
    t = 0.05 * np.arange(201)
    phi = bm_propagate(bm, t).c.transpose(0, 2, 1)
    div = max(np.abs(phi[j] - phi[j - i] @ phi[i]).max()
              for i in range(0, 201, 20) for j in range(i, 201, 15))
    exact = compute_stcf(UNDRIVEN, kernel_cfg(1.0, t_final=30)).c[-1]
    stat = np.abs(bm_stationary(bm) - exact).max()
    criterion(11, div < 1e-10 and stat < 0.02,
              f"divisibility {div:.1e}, |C_BM(inf) - C(30)| {stat:.1e}")


def test_criterion_12_washout(criterion):
    p = ModelParams(delta=1, eps0=0, epsd=1, eta=1, omega_c=1, beta=0.3)
    cfg = HeomConfig(max_tier=8, n_matsubara=1, dt=0.005, stride=2, t_final=10)
    rep = washout_check(p, cfg, [2, 5, 10, 20])
    criterion(12, rep.decreasing,
              "d(Omega=2, 5, 10, 20) = " + ", ".join(f"{d:.3e}" for d in rep.deviations))


def test_criterion_13_determinism(criterion, tmp_path):
    values = {"delta": "1", "eps0": "0", "epsd": "1", "omega": "2", "eta": "1", "beta": "0.3",
              "max_tier": "6", "dt": "0.01", "t_final": "3", "n_samples": "2000", "seed": "7",
              "sweep_axis": "omega", "sweep_values": "1,5"}
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(format_key_values(values))
    digests = []
    for task in ("blp", "rates", "sweep"):
        for rep in ("a", "b"):
            out = tmp_path / f"{task}-{rep}"
            assert cli.main([task, "--config", str(cfg_path), "--out", str(out)]) == 0
            digests.append(json.loads((out / "manifest.json").read_text())["outputs"])
    same = all(digests[i] == digests[i + 1] for i in range(0, len(digests), 2))
    n_files = sum(len(d) for d in digests[::2])
    criterion(13, same, f"{n_files} CSV/JSON outputs byte-identical across reruns")
