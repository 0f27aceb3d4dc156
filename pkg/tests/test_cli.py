import json
import subprocess
import sys

import pytest

from stackelberg_heat.cli import main
from stackelberg_heat.io import read_csv, sha256_file

SMALL = """
[geometry]
kind = "interval"
n = 12

[time]
T = 0.1
M = 12

[regions]
omega = [0.2, 0.8]
omega1 = [0.1, 0.4]
omega2 = [0.6, 0.9]
omega_d = [0.3, 0.7]
omega_prime = {prime}

[leader]
y0 = "{y0}"

[hum]
epsilon = 1e-2
solver = "{solver}"
{hum_extra}

[carleman]
samples = 20
time_samples = 21
space_samples = 41

[output]
formats = {formats}
"""


def _config(tmp_path, name="small", prime="[0.4, 0.6]", y0="x", solver="cg", hum_extra="", formats='["csv", "json"]'):
    path = tmp_path / f"{name}.toml"
    path.write_text(SMALL.format(prime=prime, y0=y0, solver=solver, hum_extra=hum_extra, formats=formats))
    return str(path)


def _report(out):
    return json.loads((out / "run_report.json").read_text())


@pytest.mark.parametrize("sub", ["simulate", "nash", "hum", "weights", "semilinear"])
def test_subcommands_succeed(tmp_path, sub):
    out = tmp_path / "out"
    assert main([sub, "--config", _config(tmp_path), "--out", str(out)]) == 0
    rep = _report(out)
    assert rep["exit_code"] == 0 and rep["subcommand"] == sub
    assert "config.json" in rep["manifest"]
    for name, digest in rep["manifest"].items():
        assert sha256_file(out / name) == digest
    for path in out.glob("*.csv"):
        h, _, _ = read_csv(path)
        assert h == rep["config_hash"]


def test_bad_observation_region_exit_code(tmp_path, capsys):
    code = main(["observability", "--config", _config(tmp_path, prime="[0.1, 0.3]"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "omega_prime" in capsys.readouterr().err


def test_unknown_key_exit_code(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[time]\nsteps = 3\n")
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_zero_data_gives_zero_control(tmp_path):
    out = tmp_path / "out"
    assert main(["hum", "--config", _config(tmp_path, y0="0"), "--out", str(out)]) == 0
    _, header, rows = read_csv(out / "hum_control.csv")
    col = header.index("f")
    assert all(float(r[col]) == 0.0 for r in rows)


def test_oracle_subcommand(tmp_path):
    out = tmp_path / "out"
    assert main(["oracle", "--config", _config(tmp_path), "--out", str(out)]) == 0
    res = json.loads((out / "oracle.json").read_text())
    assert res["passed"]
    for check in res["checks"].values():
        if check["kind"] == "max" and check["tol"] <= 1e-8:
            assert check["value"] <= 1e-8


def test_no_convergence_exit_code(tmp_path):
    out = tmp_path / "out"
    cfg = _config(tmp_path, solver="prox", hum_extra="max_iter = 1\ntol = 1e-14")
    assert main(["hum", "--config", cfg, "--out", str(out)]) == 3
    rep = _report(out)
    assert rep["exit_code"] == 3 and rep["error_type"]


def test_observability_deterministic_across_threads(tmp_path):
    cfg = _config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["observability", "--config", cfg, "--out", str(a), "--threads", "1"]) == 0
    assert main(["observability", "--config", cfg, "--out", str(b), "--threads", "3"]) == 0
    for name in ("observability_quotients.csv", "observability.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_override_changes_samples(tmp_path):
    cfg = _config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    main(["observability", "--config", cfg, "--out", str(a)])
    main(["observability", "--config", cfg, "--out", str(b), "--seed", "7"])
    assert _report(a)["config_hash"] != _report(b)["config_hash"]
    qa = (a / "observability_quotients.csv").read_text().splitlines()[2:]
    qb = (b / "observability_quotients.csv").read_text().splitlines()[2:]
    assert qa != qb


def test_output_formats_respected(tmp_path):
    out = tmp_path / "out"
    assert main(["simulate", "--config", _config(tmp_path, formats='["json"]'), "--out", str(out)]) == 0
    assert not list(out.glob("*.csv"))
    assert (out / "simulate.json").exists()


def test_sweep(tmp_path):
    a = _config(tmp_path, name="a")
    bad = _config(tmp_path, name="bad", prime="[0.1, 0.3]")
    out = tmp_path / "sw"
    assert main(["sweep", "simulate", "--config", a, bad, "--out", str(out), "--threads", "2"]) == 2
    summary = json.loads((out / "sweep_summary.json").read_text())
    assert summary["runs"] == {"a": 0, "bad": 2}
    assert (out / "a" / "trajectory.csv").exists()


def test_sweep_requires_distinct_names(tmp_path):
    a = _config(tmp_path, name="a")
    assert main(["sweep", "simulate", "--config", a, a, "--out", str(tmp_path / "sw")]) == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "stackelberg_heat", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
