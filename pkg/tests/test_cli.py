"""End-to-end runs of every CLI subcommand in a subprocess."""

import json
import os
import subprocess
import sys

import pytest

from hjh.problem import InitialData
from hjh.serialize import load_hierarchy

from conftest import make_cos_spec


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "hjh.cli", *args],
                          capture_output=True, text=True, timeout=300)


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    prob = make_cos_spec().to_dict()
    prob["initial"] = InitialData.ramp(0.4, 1.6, 0.35).to_dict()
    # auto bounds: the envelope must account for the ramp's derivatives
    prob.pop("bounds", None)
    data = {
        "problem": prob,
        "orders": [1],
        "eps": [0.25],
        "mode": "residual",
        "window": [[-0.5, 0.5]],
        "T": 0.05,
        "output_times": [0.05],
        "grids": {"n_fast": 32, "n_per": 16, "hx": 0.1, "ht": 0.025,
                  "p_box": [[0.2, 1.8]], "dp": 0.1},
    }
    path = tmp_path_factory.mktemp("cli") / "study.json"
    path.write_text(json.dumps(data, indent=2))
    return str(path)


@pytest.fixture()
def outdir(tmp_path):
    return str(tmp_path / "out")


def read_csv(path):
    lines = open(path).read().splitlines()
    return lines[0], [ln.split(",") for ln in lines[1:]]


def test_no_arguments_prints_help():
    res = run_cli()
    assert res.returncode == 1
    assert "usage" in (res.stdout + res.stderr).lower()


def test_unknown_command_fails():
    res = run_cli("frobnicate", "--config", "x.json")
    assert res.returncode == 1
    assert "hjh:" in res.stderr


def test_missing_config_fails(outdir):
    res = run_cli("validate", "--config", "/no/such/file.json",
                  "--out", outdir)
    assert res.returncode == 1
    assert "FileNotFoundError" in res.stderr


def test_validate_passes(config_path, outdir):
    res = run_cli("validate", "--config", config_path, "--out", outdir)
    assert res.returncode == 0, res.stderr
    assert "validate: pass" in res.stdout


def test_validate_flags_uncovered_gradients(config_path, outdir, tmp_path):
    data = json.load(open(config_path))
    data["grids"]["p_box"] = [[0.8, 1.2]]   # ramp needs [0.4, 1.6]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(data))
    res = run_cli("validate", "--config", str(bad), "--out", outdir)
    assert res.returncode == 2
    assert "FAIL" in res.stdout


def test_cell_writes_table(config_path, outdir):
    res = run_cli("cell", "--config", config_path, "--out", outdir)
    assert res.returncode == 0, res.stderr
    header, rows = read_csv(os.path.join(outdir, "cell.csv"))
    assert header == "p,hbar,bbar"
    assert len(rows) == 17                      # [0.2, 1.8] at dp = 0.1
    assert abs(float(rows[0][0]) - 0.2) < 1e-12
    assert all(float(r[1]) > 0 for r in rows)
    assert os.path.exists(os.path.join(outdir, "table.hjh"))


def test_effective_samples_solution(config_path, outdir):
    res = run_cli("effective", "--config", config_path, "--out", outdir)
    assert res.returncode == 0, res.stderr
    header, rows = read_csv(os.path.join(outdir, "effective.csv"))
    assert header == "x,t,u0,du0,d2u0,bbar"
    times = sorted({float(r[1]) for r in rows})
    assert times == [0.0, 0.05]
    assert len(rows) == 2 * 11                  # 11 x-samples per time
    assert all(0.2 < float(r[3]) < 1.8 for r in rows)


def test_correctors_archive_round_trips(config_path, outdir):
    res = run_cli("correctors", "--config", config_path, "--out", outdir)
    assert res.returncode == 0, res.stderr
    hier = load_hierarchy(os.path.join(outdir, "hierarchy.hjh"))
    assert hier.m_max == 1
    assert 1 in hier.wt


def test_residual_sweep(config_path, outdir):
    res = run_cli("residual", "--config", config_path, "--out", outdir)
    assert res.returncode == 0, res.stderr
    header, rows = read_csv(os.path.join(outdir, "residual.csv"))
    assert header == "m,eps,max_psi"
    assert len(rows) == 1
    m, eps, psi = rows[0]
    assert (m, eps) == ("1", "0.25")
    assert 0.0 < float(psi) < 1.0


def test_reference_snapshot(config_path, outdir):
    res = run_cli("reference", "--config", config_path, "--out", outdir)
    assert res.returncode == 0, res.stderr
    header, rows = read_csv(os.path.join(outdir, "reference-eps0.25.csv"))
    assert header == "x,t,u"
    assert len(rows) > 50
    assert all(float(r[1]) == 0.05 for r in rows[:3])


def test_compare_against_reference(config_path, outdir):
    res = run_cli("compare", "--config", config_path, "--out", outdir)
    assert res.returncode == 0, res.stderr
    header, rows = read_csv(os.path.join(outdir, "compare.csv"))
    assert header == "eps,m,sup_error"
    assert len(rows) == 1
    err = float(rows[0][2])
    assert 1e-8 < err < 0.5


def test_study_writes_report(config_path, outdir):
    res = run_cli("study", "--config", config_path, "--out", outdir)
    # a single eps cannot be rate-fitted, so passes() has nothing to reject
    assert res.returncode == 0, res.stderr
    assert "study: pass" in res.stdout
    for name in ("rows.csv", "slopes.csv", "report.json", "stages.log",
                 "rates-residual.png"):
        assert os.path.exists(os.path.join(outdir, name)), name
    header, rows = read_csv(os.path.join(outdir, "slopes.csv"))
    assert rows[0][7] == "insufficient"
