import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from mbsde.cli import main


def _run(tmp_path, *args, out="out"):
    return main([*args, "--out", str(tmp_path / out)])


def _summary(tmp_path, out="out"):
    return json.loads((tmp_path / out / "summary.json").read_text())


def test_zero_driver_run(tmp_path, capsys):
    code = _run(tmp_path, "run", "--scenario", "zero-driver", "--paths", "5000", "--steps", "16")
    assert code == 0
    s = _summary(tmp_path)
    y0, se = np.array(s["y0"]), np.array(s["se"])
    assert np.all(np.abs(y0 - [0.0, math.exp(-0.5)]) <= 3 * se)
    assert s["oracle"]["passes"]
    for name in ("diagnostics.json", "knots.csv", "picard_reports.jsonl"):
        assert (tmp_path / "out" / name).exists()
    rows = list(csv.reader(open(tmp_path / "out" / "knots.csv")))
    assert rows[0][:3] == ["t", "mean_Y_1", "mean_Y_2"] and len(rows) == 18
    assert "Y0[0]" in capsys.readouterr().out


def test_scalar_quadratic_run_meets_its_oracle(tmp_path):
    code = _run(tmp_path, "run", "--scenario", "scalar-quadratic", "--paths", "10000",
                "--steps", "16")
    assert code == 0
    assert _summary(tmp_path)["oracle"]["passes"]


def test_picard_route_without_certificate_is_a_config_error(tmp_path, capsys):
    code = _run(tmp_path, "run", "--scenario", "zero-driver", "--route", "picard",
                "--paths", "500", "--steps", "4")
    assert code == 1
    err = capsys.readouterr().err
    assert "certificate" in err and "(C, eps, rho)" in err


def test_missing_problem_is_a_config_error(tmp_path, capsys):
    assert main(["run", "--out", str(tmp_path)]) == 1
    assert "--scenario" in capsys.readouterr().err


def test_corrupted_oracle_tolerance_fails_with_numbers(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("problem: {scenario: sine-terminal}\n"
                   "grid: {N: 8}\nensemble: {M: 2000, seed: 1}\n"
                   "tolerances: {oracle_tol: 1.0e-9}\n"
                   f"output: {tmp_path / 'o'}\n")
    code = main(["verify", "--config", str(cfg)])
    assert code == 3
    out = capsys.readouterr().out
    row = next(line for line in out.splitlines() if line.startswith("oracle:y0"))
    assert "FAIL" in row and "1e-09" in row
    observed = float(row.split()[-2])
    assert observed > 1e-9
    with open(tmp_path / "o" / "verify.csv") as fh:
        rec = {r["check"]: r for r in csv.DictReader(fh)}
    assert rec["oracle:y0"]["verdict"] == "FAIL"
    assert float(rec["oracle:y0"]["threshold"]) == 1e-9


def test_projectable_verify_lists_consistency_rows(tmp_path, capsys):
    code = main(["verify", "--scenario", "projectable-composite", "--paths", "4000",
                 "--steps", "8", "--out", str(tmp_path / "p")])
    out = capsys.readouterr().out
    names = [line.split()[0] for line in out.splitlines()[1:]]
    assert {"projection:gamma", "projection:measure", "route_agreement"} <= set(names)
    assert code in (0, 3)


def test_markovian_run_exports_the_field(tmp_path):
    code = _run(tmp_path, "run", "--scenario", "damped-heat", "--paths", "4000", "--steps", "8")
    assert code == 0
    assert (tmp_path / "out" / "field.csv").exists()
    assert _summary(tmp_path)["route"] == "markovian"


def test_identical_runs_write_identical_files(tmp_path):
    args = ["run", "--scenario", "linear-vector", "--paths", "3000", "--steps", "8", "--seed", "5"]
    assert _run(tmp_path, *args, out="a") == 0
    assert _run(tmp_path, *args, out="b") == 0
    for name in ("summary.json", "diagnostics.json", "knots.csv", "picard_reports.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    _run(tmp_path, *args[:-1], "6", out="c")
    assert (tmp_path / "a" / "knots.csv").read_bytes() != (tmp_path / "c" / "knots.csv").read_bytes()


def test_sweep_writes_slopes(tmp_path, capsys):
    code = _run(tmp_path, "sweep", "--scenario", "zero-driver", "--paths", "2000",
                "--values", "4,8")
    assert code == 0
    data = json.loads((tmp_path / "out" / "sweep.json").read_text())
    assert [r["value"] for r in data["rows"]] == [4, 8]
    assert data["slopes"]["oracle"] == "exact" and data["slopes"]["against"] == "dt"
    assert "slopes against dt" in capsys.readouterr().out


def test_oracle_command(tmp_path):
    code = _run(tmp_path, "oracle", "--scenario", "sine-terminal", "--paths", "500",
                "--steps", "4", "--knot0-only")
    assert code == 0
    data = json.loads((tmp_path / "out" / "oracle.json").read_text())
    assert data["status"] == "converged" and data["nested"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mbsde", "run", "--scenario", "nope",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "unknown scenario" in proc.stderr


@pytest.mark.parametrize("argv", [["--help"], ["run", "--help"]])
def test_help(argv, capsys):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 0
