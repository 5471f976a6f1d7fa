"""Command-line front end.

Usage::

    drivenqubit <task> --config run.cfg --out results/ [--seed N] [--threads N]

The config file uses the flat ``key = value`` grammar of
:func:`drivenqubit.model.parse_key_values`.  It mixes model keys (delta, eps0,
epsd, omega, eta, omega_c, beta), hierarchy keys (max_tier, n_matsubara, dt,
t_final, terminator, tail_closure, stride, max_ados) and run keys:

    n_samples       Monte Carlo samples for the BLP measure (default 10000)
    seed            RNG seed; required by blp and by sweeps that include it
    v0              initial Bloch vector "x,y,z" for simulate (default 0,0,1)
    kernel_delta    fraction defining tau_K (default 0.9)
    eternal_t_min   start of the eternal non-Markovianity window (default 0.5)
    richardson      fourth-order time derivatives (default false)
    sweep_axis      omega | eta | beta
    sweep_values    comma-separated values; for tasks other than sweep the
                    pipeline runs once per value into "<axis>=<value>/" folders
    sweep_kernel    include tau_K in sweep rows (default false; needs epsd = 0)

Exit status: 0 on success, 2 on configuration errors, 3 on numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (
    blp_measure,
    canonical_rates,
    eternal_nm_detector,
    nv_measure,
    volume_traj,
)
from .errors import ConfigError, NumericalError
from .gqme import bm_generator, extract_kernel, gqme_residual, kernel_timescale
from .heom import HeomConfig, InitialCondition, propagate
from .io import FLOAT_FORMAT, dumps_json, sha256_file, write_csv, write_json
from .model import ModelParams, bath_expansion, parse_key_values
from .stcf import compute_stcf

log = logging.getLogger("drivenqubit")

TASKS = ("simulate", "stcf", "blp", "volume", "rates", "kernel", "sweep")
SWEEP_AXES = {"omega": "omega_drive", "omega_drive": "omega_drive", "eta": "eta", "beta": "beta"}
RUN_KEYS = ("task", "n_samples", "seed", "v0", "kernel_delta", "eternal_t_min", "richardson",
            "sweep_axis", "sweep_values", "sweep_kernel")


def _parse_bool(key, value) -> bool:
    v = value.strip().lower()
    if v not in ("true", "false"):
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    return v == "true"


def _parse_float_list(key, value) -> tuple[float, ...]:
    try:
        out = tuple(float(x) for x in value.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as comma-separated numbers") from None
    if not all(math.isfinite(x) for x in out):
        raise ConfigError(f"{key}: values must be finite")
    return out


@dataclass(frozen=True)
class RunConfig:
    task: str
    model: ModelParams
    heom: HeomConfig
    n_samples: int = 10_000
    seed: int | None = None
    v0: tuple[float, float, float] = (0.0, 0.0, 1.0)
    kernel_delta: float = 0.9
    eternal_t_min: float = 0.5
    richardson: bool = False
    sweep_axis: str | None = None
    sweep_values: tuple[float, ...] = ()
    sweep_kernel: bool = False
    raw: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_text(cls, text: str, task: str, seed: int | None = None) -> "RunConfig":
        mapping = parse_key_values(text)
        return cls.from_mapping(mapping, task, seed)

    @classmethod
    def from_mapping(cls, mapping: dict[str, str], task: str, seed: int | None = None) -> "RunConfig":
        if task not in TASKS:
            raise ConfigError(f"task: unknown task {task!r}")
        known = set(ModelParams.config_keys()) | set(HeomConfig.config_keys()) | set(RUN_KEYS)
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        if "task" in mapping and mapping["task"] != task:
            raise ConfigError(f"task: config says {mapping['task']!r} but {task!r} was requested")
        model = ModelParams.from_mapping(mapping)
        heom = HeomConfig.from_mapping(mapping)
        kw: dict = {}
        if "n_samples" in mapping:
            try:
                kw["n_samples"] = int(mapping["n_samples"])
            except ValueError:
                raise ConfigError(f"n_samples: expected an integer, got {mapping['n_samples']!r}") from None
            if kw["n_samples"] < 1:
                raise ConfigError("n_samples: must be >= 1")
        if "seed" in mapping:
            try:
                kw["seed"] = int(mapping["seed"])
            except ValueError:
                raise ConfigError(f"seed: expected an integer, got {mapping['seed']!r}") from None
        if seed is not None:
            kw["seed"] = int(seed)
        if "seed" in kw and not 0 <= kw["seed"] < 2**64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        if "v0" in mapping:
            v0 = _parse_float_list("v0", mapping["v0"])
            if len(v0) != 3 or np.linalg.norm(v0) > 1 + 1e-12:
                raise ConfigError("v0: expected three components with |v0| <= 1")
            kw["v0"] = v0
        for key in ("kernel_delta", "eternal_t_min"):
            if key in mapping:
                kw[key] = _parse_float_list(key, mapping[key])
                if len(kw[key]) != 1:
                    raise ConfigError(f"{key}: expected a single number")
                kw[key] = kw[key][0]
        if "kernel_delta" in kw and not 0 < kw["kernel_delta"] < 1:
            raise ConfigError("kernel_delta: must lie in (0, 1)")
        for key in ("richardson", "sweep_kernel"):
            if key in mapping:
                kw[key] = _parse_bool(key, mapping[key])
        if "sweep_axis" in mapping:
            axis = mapping["sweep_axis"]
            if axis not in SWEEP_AXES:
                raise ConfigError(f"sweep_axis: must be one of omega, eta, beta; got {axis!r}")
            kw["sweep_axis"] = SWEEP_AXES[axis]
        if "sweep_values" in mapping:
            kw["sweep_values"] = _parse_float_list("sweep_values", mapping["sweep_values"])
        cfg = cls(task=task, model=model, heom=heom, raw=dict(mapping), **kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.task == "sweep":
            if self.sweep_axis is None:
                raise ConfigError("sweep_axis: required for task=sweep")
            if not self.sweep_values:
                raise ConfigError("sweep_values: must be a non-empty list for task=sweep")
            for v in self.sweep_values:
                self.model.with_(**{self.sweep_axis: v})
        if self.task in ("blp", "sweep") and self.seed is None:
            raise ConfigError("seed: required for Monte Carlo tasks (set it in the config or pass --seed)")
        if self.task == "kernel" and self.model.driven:
            raise ConfigError("epsd: kernel extraction requires undriven dynamics (epsd = 0)")
        if self.task == "sweep" and self.sweep_kernel and self.model.driven:
            raise ConfigError("sweep_kernel: requires epsd = 0")
        if self.task != "sweep" and bool(self.sweep_axis) != bool(self.sweep_values):
            raise ConfigError("sweep_values: a grid needs both sweep_axis and sweep_values")

    def echo(self) -> dict:
        """Resolved configuration, as written to the manifest."""
        out = {"task": self.task}
        out.update(self.model.to_mapping())
        out.update(self.heom.to_mapping())
        out.update({
            "n_samples": str(self.n_samples),
            "v0": ",".join(repr(x) for x in self.v0),
            "kernel_delta": repr(self.kernel_delta),
            "eternal_t_min": repr(self.eternal_t_min),
            "richardson": "true" if self.richardson else "false",
        })
        if self.seed is not None:
            out["seed"] = str(self.seed)
        if self.sweep_axis is not None:
            out["sweep_axis"] = self.sweep_axis
            out["sweep_values"] = ",".join(repr(v) for v in self.sweep_values)
            out["sweep_kernel"] = "true" if self.sweep_kernel else "false"
        return out


class _Outputs:
    """Tracks files written by a run so a failed run can remove them."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.files:
            p.unlink(missing_ok=True)
        for d in sorted({p.parent for p in self.files}, key=lambda x: len(x.parts), reverse=True):
            if d != self.root and d.exists() and not any(d.iterdir()):
                d.rmdir()


# -- task pipelines --------------------------------------------------------------

def _simulate(cfg: RunConfig, out: _Outputs) -> dict:
    bath = bath_expansion(cfg.model, cfg.heom.n_matsubara, closure=cfg.heom.tail_closure)
    traj = propagate(InitialCondition.from_bloch(cfg.v0), cfg.model, bath, cfg.heom)
    s = traj.states.reshape(len(traj.times), 4)
    header = ["t"]
    cols = [traj.times]
    for k, ij in enumerate(("00", "01", "10", "11")):
        header += [f"re_{ij}", f"im_{ij}"]
        cols += [s[:, k].real, s[:, k].imag]
    write_csv(out.path("trajectory.csv"), header, cols)
    return {}


def _stcf(cfg: RunConfig, out: _Outputs, traj=None) -> dict:
    traj = compute_stcf(cfg.model, cfg.heom) if traj is None else traj
    traj.to_csv(out.path("stcf.csv"), sidecar=False)
    write_json(out.path("stcf.json"), traj.metadata())
    return {}


def _blp(cfg: RunConfig, out: _Outputs, traj=None) -> dict:
    traj = compute_stcf(cfg.model, cfg.heom) if traj is None else traj
    res = blp_measure(traj, cfg.n_samples, cfg.seed)
    write_csv(out.path("blp.csv"), ["t", "D_max"], [res.t_grid, res.d_max])
    summary = res.summary()
    write_json(out.path("blp.json"), summary)
    return {"n_blp": res.n_blp}


def _volume(cfg: RunConfig, out: _Outputs, traj=None) -> dict:
    traj = compute_stcf(cfg.model, cfg.heom) if traj is None else traj
    vol = volume_traj(traj)
    n_v = nv_measure(vol)
    write_csv(out.path("volume.csv"), ["t", "V"], [vol.t_grid, vol.v])
    write_json(out.path("volume.json"), {"n_v": n_v, "tau_th": vol.tau_th})
    return {"n_v": n_v, "tau_th": vol.tau_th}


def _rates(cfg: RunConfig, out: _Outputs, traj=None) -> dict:
    traj = compute_stcf(cfg.model, cfg.heom) if traj is None else traj
    rates = canonical_rates(traj, richardson=cfg.richardson)
    eternal = eternal_nm_detector(rates, t_min=cfg.eternal_t_min)
    write_csv(out.path("rates.csv"), ["t", "gamma_1", "gamma_2", "gamma_3"],
              [rates.t_grid, *rates.gamma.T])
    summary = {"tau_th": rates.valid_until, "eternal_nm": eternal.eternal,
               "max_lowest_rate": eternal.max_lowest_rate, "t_min": eternal.t_min,
               "sum_rule_residual": rates.sum_rule_residual()}
    write_json(out.path("rates.json"), summary)
    return {"eternal_nm": eternal.eternal}


def _kernel(cfg: RunConfig, out: _Outputs, traj=None) -> dict:
    traj = compute_stcf(cfg.model, cfg.heom) if traj is None else traj
    kern = extract_kernel(traj, richardson=cfg.richardson)
    tau_k = kernel_timescale(kern, cfg.kernel_delta)
    residual = gqme_residual(traj, kern.x, kern, richardson=cfg.richardson)
    report = {"tau_k": tau_k, "delta": cfg.kernel_delta, "residual": residual}
    try:
        bm = bm_generator(kern.x, kern)
    except NumericalError as exc:
        report["bm_error"] = str(exc)
    else:
        ev = bm.eigenvalues
        report["bm_eigenvalues"] = [[float(z.real), float(z.imag)] for z in ev]
        report["bm_truncation_bound"] = bm.truncation_bound
    kern.to_csv(out.path("kernel.csv"))
    write_json(out.path("kernel.json"), report)
    return {"tau_k": tau_k}


PIPELINES = {"simulate": _simulate, "stcf": _stcf, "blp": _blp, "volume": _volume,
             "rates": _rates, "kernel": _kernel}

SUMMARY_COLUMNS = ("value", "n_blp", "n_v", "tau_th", "tau_k", "eternal_nm", "error")


def _sweep_point(args) -> dict:
    cfg, value = args
    model = cfg.model.with_(**{cfg.sweep_axis: value})
    row = {"value": value, "n_blp": None, "n_v": None, "tau_th": None, "tau_k": None,
           "eternal_nm": None, "error": ""}
    try:
        traj = compute_stcf(model, cfg.heom)
        row["n_blp"] = blp_measure(traj, cfg.n_samples, cfg.seed).n_blp
        vol = volume_traj(traj)
        row["n_v"] = nv_measure(vol)
        row["tau_th"] = vol.tau_th
        rates = canonical_rates(traj, richardson=cfg.richardson)
        row["eternal_nm"] = eternal_nm_detector(rates, t_min=cfg.eternal_t_min).eternal
        if cfg.sweep_kernel:
            kern = extract_kernel(traj, richardson=cfg.richardson)
            row["tau_k"] = kernel_timescale(kern, cfg.kernel_delta)
    except (ConfigError, NumericalError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating, int)):
        return FLOAT_FORMAT % float(v)
    return str(v)


def _sweep(cfg: RunConfig, out: _Outputs, threads: int = 1) -> dict:
    jobs = [(cfg, v) for v in cfg.sweep_values]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    with out.path("summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((cfg.sweep_axis,) + SUMMARY_COLUMNS[1:])
        for r in rows:
            w.writerow([_fmt(r[c]) for c in SUMMARY_COLUMNS])
    write_json(out.path("summary.json"), {"axis": cfg.sweep_axis, "rows": rows, "seed": cfg.seed,
                                          "n_samples": cfg.n_samples})
    return {"failed_points": sum(1 for r in rows if r["error"])}


def _grid(cfg: RunConfig, out: _Outputs) -> dict:
    """Run a single-task pipeline once per grid value, one subdirectory each."""
    info = {}
    for value in cfg.sweep_values:
        sub = f"{cfg.sweep_axis}={FLOAT_FORMAT % value}"
        point = replace(cfg, model=cfg.model.with_(**{cfg.sweep_axis: value}))
        info[sub] = PIPELINES[cfg.task](point, _Prefixed(out, sub))
    return info


class _Prefixed:
    def __init__(self, out: _Outputs, prefix: str):
        self.out, self.prefix = out, prefix

    def path(self, name: str) -> Path:
        return self.out.path(f"{self.prefix}/{name}")


def _origin(exc: BaseException) -> str:
    """Package module in which ``exc`` was raised."""
    name = "drivenqubit"
    tb = exc.__traceback__
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("drivenqubit."):
            name = mod
        tb = tb.tb_next
    return name


def run(cfg: RunConfig, out_dir, threads: int = 1) -> dict:
    """Run one task, write its outputs and ``manifest.json``; return the manifest.

    On any error the files written so far are removed before re-raising.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    out = _Outputs(root)
    start = time.perf_counter()
    try:
        if cfg.task == "sweep":
            info = _sweep(cfg, out, threads)
        elif cfg.sweep_axis is not None:
            info = _grid(cfg, out)
        else:
            info = PIPELINES[cfg.task](cfg, out)
        manifest = {
            "task": cfg.task,
            "version": __version__,
            "config": cfg.echo(),
            "outputs": {p.relative_to(root).as_posix(): sha256_file(p) for p in out.files},
            "info": info,
            "wall_time_s": time.perf_counter() - start,
        }
        (root / "manifest.json").write_text(dumps_json(manifest))
    except BaseException:
        out.cleanup()
        raise
    return manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drivenqubit", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="task", required=True)
    helps = {
        "simulate": "reduced density matrix for one initial Bloch vector",
        "stcf": "spin time-correlation matrix C(t)",
        "blp": "trace-distance backflow N_BLP (Monte Carlo)",
        "volume": "accessible volume V(t) and N_V",
        "rates": "canonical rates up to the invertibility threshold",
        "kernel": "memory kernel, tau_K and Born-Markov generator (undriven only)",
        "sweep": "summary table over omega, eta or beta",
    }
    for name in TASKS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, type=Path, help="key = value config file")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="RNG seed (overrides config)")
        p.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg = RunConfig.from_text(text, args.task, seed=args.seed)
        manifest = run(cfg, args.out, threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error in {_origin(exc)}: {exc}", file=sys.stderr)
        return 3
    log.info("wrote %d files to %s", len(manifest["outputs"]), args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
