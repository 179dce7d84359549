import json
import shutil
import subprocess

import pytest

from lqpg.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps({
        "preset": "mean-variance", "grid": 16, "iterations": 80, "mesh_family": [8, 16],
        "unscaled_budget": 400, "tail": 10,
    }))
    return str(path)


def test_validate(capsys, tmp_path):
    code, out, _ = run(capsys, "validate", "--out", str(tmp_path))
    assert code == 0 and json.loads(out)["ok"] is True


def test_riccati_and_cost(capsys, tmp_path):
    code, out, _ = run(capsys, "riccati", "--out", str(tmp_path))
    assert code == 0
    info = json.loads(out)
    assert info["cstar"] == pytest.approx(0.03931836718603425, abs=1e-14)
    lines = (tmp_path / "riccati.csv").read_text().splitlines()
    assert lines[0] == "t,P,phi,K_0,K_1,K_2" and len(lines) == 130
    code, out, _ = run(capsys, "cost", "--policy", "optimal", "--out", str(tmp_path))
    assert code == 0 and json.loads(out)["total"] == pytest.approx(info["cstar"], abs=1e-12)


def test_pg_run(capsys, tmp_path):
    code, out, _ = run(capsys, "pg-run", "--grid", "16", "--out", str(tmp_path))
    info = json.loads(out)
    assert code == 0 and info["aborted"] is None and info["n_epsilon"] is not None
    assert all(info["flags"].values())
    assert (tmp_path / "pg_run.csv").exists()


def test_numerical_failure_exit_code(capsys, tmp_path):
    code, _, err = run(capsys, "pg-run", "--grid", "16", "--tau", "0.6", "--out", str(tmp_path))
    assert code == 2 and "numerical failure" in err
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert diag["command"] == "pg-run" and diag["error"] == "PgAborted"


def test_bench_failure_writes_partial_manifest(capsys, tmp_path, small_config):
    code, _, _ = run(capsys, "bench", "--config", small_config, "--tau", "0.6", "--no-sweep", "--out", str(tmp_path))
    assert code == 2
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "failed" and "cstar_riccati" in manifest
    assert (tmp_path / "diagnostics.json").exists()


@pytest.mark.parametrize(
    "argv, needle",
    [
        (["--grid", "0"], "grid"),
        (["--preset", "nope"], "preset"),
        (["--tau", "-1"], "tau"),
    ],
)
def test_config_errors_exit_1(capsys, tmp_path, argv, needle):
    code, _, err = run(capsys, "riccati", *argv, "--out", str(tmp_path))
    assert code == 1 and "config error" in err and needle in err


def test_config_file_errors(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"preset": "mean-variance", "colour": "red"}))
    code, _, err = run(capsys, "bench", "--config", str(bad), "--out", str(tmp_path))
    assert code == 1 and "colour" in err
    code, _, err = run(capsys, "bench", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path))
    assert code == 1


def test_dry_run(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--dry-run", "--out", str(tmp_path / "b"))
    assert code == 0 and json.loads(out)["written"] == ["manifest.json"]
    assert sorted(p.name for p in (tmp_path / "b").iterdir()) == ["manifest.json"]
    code, out, _ = run(capsys, "mesh-sweep", "--dry-run", "--tau", "0.02", "--out", str(tmp_path / "m"))
    assert code == 0 and json.loads(out)["tau"] == 0.02
    assert sorted(p.name for p in (tmp_path / "m").iterdir()) == ["manifest.json"]


def test_bench_small(capsys, tmp_path, small_config):
    code, out, _ = run(capsys, "bench", "--config", small_config, "--format", "csv", "--out", str(tmp_path))
    assert code == 0
    info = json.loads(out)
    assert info["written"] == ["manifest.json", "convergence.csv", "mesh_sweep.csv"]
    assert [row[0] for row in info["sweep"]] == [8, 16]


def test_mesh_sweep(capsys, tmp_path, small_config):
    code, out, _ = run(capsys, "mesh-sweep", "--config", small_config, "--out", str(tmp_path))
    assert code == 0 and json.loads(out)["optimum"] == "converged"
    assert (tmp_path / "mesh_sweep.csv").exists() and (tmp_path / "mesh_sweep.svg").exists()


def test_mc_estimate(capsys, tmp_path):
    code, out, _ = run(capsys, "mc-estimate", "--paths", "500", "--seed", "3", "--out", str(tmp_path))
    info = json.loads(out)
    assert code == 0 and info["seed"] == 3 and info["paths"] == 500
    assert abs(info["mc_cost"] - info["ode_cost"]) < 4 * info["std_error"] + 5e-3
    assert (tmp_path / "mc_ensemble.csv").exists()


def test_landscape(capsys, tmp_path):
    code, out, _ = run(capsys, "landscape", "--cases", "3", "--matrix-cases", "1", "--out", str(tmp_path))
    info = json.loads(out)
    assert code == 0 and info["cases"] == 4
    assert info["smoothness_all"] and info["lojasiewicz_all"]
    assert len((tmp_path / "landscape.csv").read_text().splitlines()) == 1 + 4 * 3


def test_console_script_installed():
    exe = shutil.which("lqpg")
    if exe is None:
        pytest.skip("console script not on PATH")
    res = subprocess.run([exe, "--help"], capture_output=True, text=True, check=False)
    assert res.returncode == 0
    for name in ("validate", "riccati", "cost", "pg-run", "mesh-sweep", "mc-estimate", "landscape", "bench"):
        assert name in res.stdout
