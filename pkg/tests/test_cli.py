import csv
import json
import shutil
import subprocess
import sys

import pytest

from sbc.cli import EXIT_ERROR, EXIT_INFEASIBLE, EXIT_OK, main
from sbc.expcert import ExpCertificate, check_certificate_sampling
from sbc.problem_file import builtin_path
from sbc.timedep import TimeDepCertificate, check_timedep_sampling


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pop_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("verify")
    assert run("verify", "population", "--out-dir", out) == EXIT_OK
    return out


def test_verify_writes_reports(pop_out, capsys):
    names = sorted(p.name for p in pop_out.iterdir())
    assert names == ["population.curve.csv", "population.report.json", "population.report.txt"]
    d = json.loads((pop_out / "population.report.json").read_text())
    assert d["status"] == "certified"
    assert d["total_bound"] < 0.12498
    rows = list(csv.reader((pop_out / "population.curve.csv").open()))
    assert rows[0] == ["T", "bounded", "tail", "total"] and len(rows) == 9


def test_verify_is_byte_reproducible(pop_out, tmp_path):
    assert run("verify", builtin_path("population"), "--out-dir", tmp_path) == EXIT_OK
    for name in ("population.report.json", "population.report.txt", "population.curve.csv"):
        assert (tmp_path / name).read_bytes() == (pop_out / name).read_bytes()


def test_certificates_reload_and_revalidate(pop_out, population):
    d = json.loads((pop_out / "population.report.json").read_text())
    exp = ExpCertificate.from_dict(d["exp_certificate"])
    assert check_certificate_sampling(exp, population.problem, 10_000).clean
    h = TimeDepCertificate.from_dict(d["timedep_certificate"])
    assert check_timedep_sampling(h, population.problem, 10_000).clean


def test_missing_file(tmp_path, capsys):
    assert run("verify", tmp_path / "nope.prob", "--out-dir", tmp_path) == EXIT_ERROR
    assert "not found" in capsys.readouterr().err


def test_parse_error_reports_position(tmp_path, capsys):
    src = builtin_path("population").read_text().replace('drift: ["-x1"]', 'drift: ["-x1 +"]')
    path = tmp_path / "broken.prob"
    path.write_text(src)
    assert run("verify", path, "--out-dir", tmp_path) == EXIT_ERROR
    assert "line 6" in capsys.readouterr().err


def test_bad_flags(tmp_path):
    assert run("verify", "population", "--lambda", "[[1, -2], [0.5, 1]]", "--out-dir", tmp_path) == EXIT_ERROR
    assert run("verify", "population", "--lambda", "{a: 1}", "--out-dir", tmp_path) == EXIT_ERROR
    assert run("verify", "population", "--solver-tol", "0", "--out-dir", tmp_path) == EXIT_ERROR
    assert run("bogus") == EXIT_ERROR
    assert run("verify") == EXIT_ERROR


def test_infeasible_exit_code(tmp_path):
    assert run("verify", "population", "--lambda", "1000", "--out-dir", tmp_path) == EXIT_INFEASIBLE
    d = json.loads((tmp_path / "population.report.json").read_text())
    assert d["status"] == "partial" and d["failed_stage"] == "exponential certificate"


def test_sweep_rows(tmp_path, capsys):
    assert run("sweep", "population", "--T-grid", "1:8:1", "--out-dir", tmp_path) == EXIT_OK
    rows = list(csv.reader((tmp_path / "population.curve.csv").open()))
    assert len(rows) == 9
    body = [[float(v) for v in r] for r in rows[1:]]
    tails = [r[2] for r in body]
    assert all(b < a for a, b in zip(tails, tails[1:]))
    for T, bounded, tail, total in body:
        assert total == pytest.approx(bounded + tail, rel=1e-9)


def test_empty_sweep_grid(tmp_path):
    assert run("sweep", "population", "--T-grid", "3:1:1", "--out-dir", tmp_path) == EXIT_ERROR
    assert run("sweep", "population", "--T-grid", "1:2", "--out-dir", tmp_path) == EXIT_ERROR


def test_simulate_seed_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("simulate", "population", "--trials", 20_000, "--horizon", 10, "--seed", 42,
                   "--out-dir", out) == EXIT_OK
    assert (a / "population.sim.csv").read_bytes() == (b / "population.sim.csv").read_bytes()
    row = next(csv.DictReader((a / "population.sim.csv").open()))
    assert float(row["rate"]) < 0.12498


def test_simulate_rejects_zero_trials(tmp_path, capsys):
    assert run("simulate", "population", "--trials", 0, "--out-dir", tmp_path) == EXIT_ERROR
    assert run("simulate", "population", "--trials", -5, "--out-dir", tmp_path) == EXIT_ERROR


def test_verify_with_simulation_flag(tmp_path):
    assert run("verify", "population", "--simulate", "--trials", 2000, "--T-grid", "1:2:1",
               "--out-dir", tmp_path) == EXIT_OK
    assert (tmp_path / "population.sim.csv").exists()


def test_console_script(tmp_path):
    exe = shutil.which("sbc")
    cmd = [exe] if exe else [sys.executable, "-m", "sbc.cli"]
    proc = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "verify" in proc.stdout
