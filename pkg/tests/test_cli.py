import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from drivenqubit import cli
from drivenqubit.errors import ConfigError, HeomDivergenceError
from drivenqubit.io import read_csv, sha256_file
from drivenqubit.model import format_key_values

BASE = {"delta": "1", "eps0": "0", "epsd": "1", "omega": "1", "eta": "1", "omega_c": "1",
        "beta": "0.3", "max_tier": "4", "n_matsubara": "1", "dt": "0.01", "t_final": "2",
        "n_samples": "200", "seed": "3"}


def write_cfg(path, **over):
    values = {**BASE, **{k: str(v) for k, v in over.items()}}
    values = {k: v for k, v in values.items() if v != "None"}
    path.write_text(format_key_values(values))
    return path


def run_main(tmp_path, task, out="out", **over):
    cfg = write_cfg(tmp_path / f"{task}.cfg", **over)
    return cli.main([task, "--config", str(cfg), "--out", str(tmp_path / out)])


def files_under(root):
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file())


# -- config parsing -----------------------------------------------------------------

@pytest.mark.parametrize("over,key", [
    (dict(bogus=1), "bogus"),
    (dict(n_samples=0), "n_samples"),
    (dict(seed=-1), "seed"),
    (dict(v0="1,1,1"), "v0"),
    (dict(kernel_delta=1.5), "kernel_delta"),
    (dict(richardson="maybe"), "richardson"),
    (dict(sweep_axis="delta", sweep_values="1"), "sweep_axis"),
    (dict(sweep_values="1,x"), "sweep_values"),
    (dict(task="blp"), "task"),
])
def test_config_errors_name_the_key(over, key):
    mapping = {**BASE, **{k: str(v) for k, v in over.items()}}
    with pytest.raises(ConfigError, match=key):
        cli.RunConfig.from_mapping(mapping, "stcf")


def test_seed_required_for_blp():
    mapping = {k: v for k, v in BASE.items() if k != "seed"}
    with pytest.raises(ConfigError, match="seed"):
        cli.RunConfig.from_mapping(mapping, "blp")
    assert cli.RunConfig.from_mapping(mapping, "blp", seed=11).seed == 11


def test_cli_seed_overrides_config():
    assert cli.RunConfig.from_mapping(BASE, "blp", seed=5).seed == 5


def test_kernel_requires_undriven():
    with pytest.raises(ConfigError, match="epsd"):
        cli.RunConfig.from_mapping(BASE, "kernel")
    with pytest.raises(ConfigError, match="sweep_kernel"):
        cli.RunConfig.from_mapping({**BASE, "sweep_axis": "eta", "sweep_values": "1",
                                    "sweep_kernel": "true"}, "sweep")


def test_sweep_needs_axis_and_values():
    with pytest.raises(ConfigError, match="sweep_axis"):
        cli.RunConfig.from_mapping(BASE, "sweep")
    with pytest.raises(ConfigError, match="sweep_values"):
        cli.RunConfig.from_mapping({**BASE, "sweep_axis": "eta"}, "stcf")


def test_sweep_values_validated_against_model():
    with pytest.raises(ConfigError):
        cli.RunConfig.from_mapping({**BASE, "sweep_axis": "eta", "sweep_values": "1,-1"}, "sweep")


def test_echo_round_trips():
    cfg = cli.RunConfig.from_mapping({**BASE, "sweep_axis": "omega", "sweep_values": "0,2.5"},
                                     "sweep")
    again = cli.RunConfig.from_mapping(cfg.echo(), "sweep")
    assert again == cfg
    assert again.echo() == cfg.echo()


# -- running tasks ------------------------------------------------------------------

EXPECTED = {
    "simulate": ["trajectory.csv"],
    "stcf": ["stcf.csv", "stcf.json"],
    "blp": ["blp.csv", "blp.json"],
    "volume": ["volume.csv", "volume.json"],
    "rates": ["rates.csv", "rates.json"],
}


@pytest.mark.parametrize("task", sorted(EXPECTED))
def test_task_outputs_and_manifest(tmp_path, task):
    assert run_main(tmp_path, task) == 0
    root = tmp_path / "out"
    manifest = json.loads((root / "manifest.json").read_text())
    assert sorted(manifest["outputs"]) == EXPECTED[task]
    # No orphans: every file except the manifest is listed exactly once.
    assert files_under(root) == sorted(EXPECTED[task] + ["manifest.json"])
    for name, digest in manifest["outputs"].items():
        assert sha256_file(root / name) == digest
    assert manifest["config"]["task"] == task


def test_stcf_csv_has_sixteen_columns(tmp_path):
    run_main(tmp_path, "stcf")
    header, data = read_csv(tmp_path / "out" / "stcf.csv")
    assert len(header) == 17 and header[0] == "t"
    np.testing.assert_allclose(data[0, 1:], np.eye(4).ravel())


def test_kernel_task(tmp_path):
    assert run_main(tmp_path, "kernel", epsd=0, eps0=1, t_final=4, dt=0.005, stride=2,
                    tail_closure="false") == 0
    report = json.loads((tmp_path / "out" / "kernel.json").read_text())
    assert report["delta"] == 0.9
    assert ("bm_eigenvalues" in report) != ("bm_error" in report)


def test_rates_csv_stops_at_threshold(tmp_path):
    run_main(tmp_path, "rates")
    _, data = read_csv(tmp_path / "out" / "rates.csv")
    summary = json.loads((tmp_path / "out" / "rates.json").read_text())
    if summary["tau_th"] is not None:
        assert data[-1, 0] <= summary["tau_th"] + 1e-12


def test_outputs_are_byte_identical_across_runs(tmp_path):
    run_main(tmp_path, "blp", out="a")
    run_main(tmp_path, "blp", out="b")
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["outputs"] == mb["outputs"]
    ma.pop("wall_time_s"), mb.pop("wall_time_s")
    assert ma == mb


def test_grid_over_single_task(tmp_path):
    assert run_main(tmp_path, "stcf", sweep_axis="omega", sweep_values="0,5") == 0
    names = files_under(tmp_path / "out")
    assert "omega_drive=0/stcf.csv" in names and "omega_drive=5/stcf.csv" in names


def test_sweep_rows_in_input_order_with_workers(tmp_path):
    cfg = write_cfg(tmp_path / "s.cfg", sweep_axis="omega", sweep_values="5,0,2")
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "p"),
                     "--threads", "2"]) == 0
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    with (tmp_path / "p" / "summary.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "omega_drive"
    assert [r[0] for r in rows[1:]] == ["5", "0", "2"]
    assert (tmp_path / "p" / "summary.csv").read_bytes() == (tmp_path / "s" / "summary.csv").read_bytes()


def test_sweep_single_value(tmp_path):
    assert run_main(tmp_path, "sweep", sweep_axis="eta", sweep_values="0.5") == 0
    rows = json.loads((tmp_path / "out" / "summary.json").read_text())["rows"]
    assert len(rows) == 1 and rows[0]["error"] == ""


def test_sweep_records_point_failures(tmp_path):
    # beta = 0.05 pushes the first Matsubara rate outside the RK4 region.
    assert run_main(tmp_path, "sweep", sweep_axis="beta", sweep_values="0.3,0.05") == 0
    rows = json.loads((tmp_path / "out" / "summary.json").read_text())["rows"]
    assert rows[0]["error"] == ""
    assert rows[1]["error"].startswith("ConfigError")
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["info"]["failed_points"] == 1


# -- failures and exit codes --------------------------------------------------------

def test_config_error_exit_code(tmp_path, capsys):
    assert run_main(tmp_path, "stcf", bogus=1) == 2
    assert "bogus" in capsys.readouterr().err
    assert not (tmp_path / "out" / "manifest.json").exists()


def test_missing_config_file(tmp_path):
    assert cli.main(["stcf", "--config", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2


def test_failed_run_removes_partial_outputs(tmp_path):
    code = run_main(tmp_path, "stcf", sweep_axis="beta", sweep_values="0.3,0.05")
    assert code == 2
    assert files_under(tmp_path / "out") == []


def test_numerical_error_exit_code(tmp_path, monkeypatch, capsys):
    def boom(*a, **kw):
        raise HeomDivergenceError("non-finite auxiliary operator at tier 2 (t=0.5)", tier=2, time=0.5)

    monkeypatch.setattr(cli, "compute_stcf", boom)
    assert run_main(tmp_path, "volume") == 3
    err = capsys.readouterr().err
    assert err.startswith("numerical error in drivenqubit.cli") and "t=0.5" in err
    assert files_under(tmp_path / "out") == []


def test_console_entry_point(tmp_path):
    cfg = write_cfg(tmp_path / "c.cfg", t_final=0.5)
    proc = subprocess.run([sys.executable, "-m", "drivenqubit.cli", "simulate", "--config",
                           str(cfg), "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "trajectory.csv").exists()
