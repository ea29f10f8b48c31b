import json
import subprocess

import numpy as np
import pytest

from borinot.actuation import bench_path
from borinot.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SOLVER, build_parser, main
from borinot.mission import mission_path
from borinot.model import reference_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def manifest(out_dir, name):
    return json.loads((out_dir / f"manifest_{name}.json").read_text())


def test_model_validate_summary(capsys, tmp_path):
    code, out, _ = run(capsys, "--out-dir", tmp_path, "model", "validate")
    assert code == EXIT_OK
    assert out.startswith("mass 2.854 kg, TWR 3.45, hover throttle ")
    m = manifest(tmp_path, "model_validate")
    assert m["config_hashes"]["model"]["path"] == str(reference_path())


def test_model_validate_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "--out-dir", tmp_path, "model", "validate", tmp_path / "nope.json")
    assert code == EXIT_CONFIG and "nope.json" in err


def test_model_validate_malformed_json(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"links": [\n')
    code, _, err = run(capsys, "--out-dir", tmp_path, "model", "validate", bad)
    assert code == EXIT_CONFIG and "line 2" in err


def test_model_validate_schema_error(capsys, tmp_path):
    doc = json.loads(reference_path().read_text())
    doc["unexpected"] = 1
    path = tmp_path / "m.json"
    path.write_text(json.dumps(doc))
    code, _, err = run(capsys, "--out-dir", tmp_path, "model", "validate", path)
    assert code == EXIT_CONFIG and err.startswith("error:")


def test_thrustmap_fit_and_eval(capsys, tmp_path):
    code, out, _ = run(capsys, "--out-dir", tmp_path, "thrustmap", "fit", bench_path())
    assert code == EXIT_OK and "thrust RMSE" in out
    map_path = tmp_path / "thrust_map.json"
    assert json.loads(map_path.read_text())["thrust_map"]["kind"] == "thrust_surface"
    code, out, _ = run(capsys, "--out-dir", tmp_path, "thrustmap", "eval", map_path,
                       "--thrust", 16.1, "--thrust", 5.0, "--voltage", 21.0)
    assert code == EXIT_OK and "(saturated)" in out
    rows = np.loadtxt(tmp_path / "thrust_commands.csv", delimiter=",", skiprows=1)
    assert rows[0, 4] == 1.0 and rows[1, 4] == 0.0
    assert rows[1, 3] == pytest.approx(5.0, abs=1e-9)
    assert manifest(tmp_path, "thrustmap_eval")["config_hashes"]["map"]["sha256"]


def test_thrustmap_fit_bad_header(capsys, tmp_path):
    bad = tmp_path / "b.csv"
    bad.write_text("a,b\n1,2\n")
    code, _, err = run(capsys, "--out-dir", tmp_path, "thrustmap", "fit", bad)
    assert code == EXIT_CONFIG and "header" in err


def test_jump_summary_and_manifest(capsys, tmp_path):
    code, out, _ = run(capsys, "--out-dir", tmp_path, "--seed", 4, "jump", "--beta", 0.5)
    assert code == EXIT_OK
    line = next(l for l in out.splitlines() if l.startswith("airborne_deceleration"))
    assert float(line.split()[1]) == pytest.approx(4.905, rel=0.02)
    m = manifest(tmp_path, "jump")
    assert m["seed"] == 4 and m["status"] == "ok"
    assert sorted(m["artifacts"]) == sorted(str(tmp_path / f) for f in ("jump_beta0.5.csv", "jump_beta0.5.json"))
    assert set(m["versions"]) >= {"python", "numpy", "numba", "artifact"}


def test_solve_writes_rail(capsys, tmp_path):
    code, out, _ = run(capsys, "--out-dir", tmp_path, "solve", "hover")
    assert code == EXIT_OK
    data = np.loadtxt(tmp_path / "rail_hover.csv", delimiter=",", skiprows=1)
    assert data.shape[0] == 251
    assert manifest(tmp_path, "solve")["config_hashes"]["mission"]["path"] == str(mission_path("hover"))


def test_solve_non_convergence_exit_code(capsys, tmp_path):
    doc = json.loads(mission_path("sagittal_2.0").read_text())
    doc["solver"] = {"max_iters": 1, "continuation": [1.0]}
    path = tmp_path / "short.json"
    path.write_text(json.dumps(doc))
    code, _, err = run(capsys, "--out-dir", tmp_path, "solve", path)
    assert code == EXIT_SOLVER and "cost trace" in err
    assert manifest(tmp_path, "solve")["status"] == "solver-failure"


def test_mpc_run_is_reproducible(capsys, tmp_path):
    run(capsys, "--out-dir", tmp_path, "solve", "hover")
    rail = tmp_path / "rail_hover.csv"
    outs = []
    for k in range(2):
        out_dir = tmp_path / f"run{k}"
        code, out, _ = run(capsys, "--out-dir", out_dir, "--seed", 3, "--config", _noise_config(tmp_path),
                           "mpc", "hover", "--rail", rail, "--duration", 0.2)
        assert code == EXIT_OK and "median_mpc_ms" in out
        outs.append((out_dir / "mpc_hover.csv").read_bytes())
    assert outs[0] == outs[1]


def _noise_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"plant": {"noise_std": 0.001}}))
    return path


def test_bad_config_exit_code(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"plant": {"mass_scale": 2.0}}))
    code, _, err = run(capsys, "--out-dir", tmp_path, "--config", cfg, "mpc", "hover", "--duration", 0.1)
    assert code == EXIT_CONFIG and "20%" in err
    cfg.write_text("[1, 2")
    code, _, _ = run(capsys, "--out-dir", tmp_path, "--config", cfg, "jump", "--beta", 0.5)
    assert code == EXIT_CONFIG


def test_unwritable_out_dir_is_io_error(capsys, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, _ = run(capsys, "--out-dir", blocker, "thrustmap", "fit", bench_path())
    assert code == EXIT_IO


def test_global_flags_before_and_after_subcommand(tmp_path):
    p = build_parser()
    a = p.parse_args(["--seed", "5", "--out-dir", str(tmp_path), "jump", "--beta", "0.5"])
    assert a.seed == 5 and a.out_dir == tmp_path
    b = p.parse_args(["jump", "--beta", "0.5", "--seed", "6"])
    assert b.seed == 6 and b.beta == [0.5]


def test_console_script(tmp_path):
    r = subprocess.run(["borinot", "--out-dir", str(tmp_path), "model", "validate"], capture_output=True,
                       text=True, timeout=120)
    assert r.returncode == 0 and "TWR 3.45" in r.stdout
