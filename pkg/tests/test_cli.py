import csv
import json

import numpy as np
import pytest

from ghzclock import cli, noisysim, pulsegen
from ghzclock.config import default_config, validate
from ghzclock.constants import OMEGA_R
from ghzclock.geometry import standard_arrangement


def run(tmp_path, command, doc=None, *extra):
    args = [command, "--out", str(tmp_path)]
    if doc is not None:
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        args += ["--config", str(path)]
    return cli.main(args + list(extra))


def test_optimize_pulse_default(tmp_path):
    assert run(tmp_path, "optimize-pulse") == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["fidelity"] >= 0.999
    p = pulsegen.load_pulse(tmp_path / "pulse.txt")
    assert pulsegen.gate_fidelity(p, 2)[0] == pytest.approx(report["fidelity"], abs=1e-12)


def test_optimize_pulse_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    assert run(a, "optimize-pulse", None, "--seed", "7") == 0
    assert run(b, "optimize-pulse", None, "--seed", "7") == 0
    assert (a / "pulse.txt").read_bytes() == (b / "pulse.txt").read_bytes()


def test_missing_rabi(tmp_path, capsys):
    doc = {"pulse": {"n_max": 2, "num_steps": 49}}
    assert run(tmp_path, "optimize-pulse", doc) == 2
    err = capsys.readouterr().err
    assert "rabi" in err and "required" in err.lower()


def test_unknown_key_rejected(tmp_path):
    doc = default_config("cascade")
    doc["cascade"]["bogus"] = 1
    assert run(tmp_path, "cascade", doc) == 2


def test_missing_block(tmp_path):
    assert run(tmp_path, "run-clock", {"seed": 1}) == 2


def test_optimizer_shortfall_exit_code(tmp_path):
    doc = {"pulse": {"n_max": 2, "rabi": OMEGA_R, "num_steps": 20, "restarts": 1, "maxiter": 5}}
    assert run(tmp_path, "optimize-pulse", doc) == 3
    assert (tmp_path / "pulse.txt").exists()


def test_simulate_ghz_rows_and_ideal_fidelity(tmp_path):
    shots, phases = 60, 8
    doc = {"ghz": {"num_atoms": 2, "shots": shots, "num_phases": phases}, "noise": {"preset": "ideal"}}
    assert run(tmp_path, "simulate-ghz", doc) == 0
    with open(tmp_path / "shots.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == shots * (phases + 1)
    report = json.loads((tmp_path / "fidelity.json").read_text())
    assert report["rows"] == shots * (phases + 1)
    assert abs(report["F_raw"] - 1) < 3 / np.sqrt(shots)


def test_finite_blockade_trend():
    values = [noisysim.finite_blockade_fidelity(n, pulsegen.reference_pulse(n), standard_arrangement(n))[0]
              for n in (2, 4, 6, 8)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_run_clock_zero_noise(tmp_path):
    doc = {"clock": {"cycles": 200, "white_fm_adev_1s": 0.0, "projection_noise": False, "compare_css": False}}
    assert run(tmp_path, "run-clock", doc) == 0
    with open(tmp_path / "yseries.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    col = [k for k in rows[0] if k.startswith("y")][0]
    assert all(float(r[col]) == 0 for r in rows)
    report = json.loads((tmp_path / "allan.json").read_text())
    assert all(a == 0 for a in report["allan"]["adev"])


def test_run_clock_seed_determinism(tmp_path):
    doc = {"clock": {"cycles": 300, "compare_css": False}}
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    assert run(a, "run-clock", doc) == 0
    assert run(b, "run-clock", doc) == 0
    assert (a / "yseries.csv").read_bytes() == (b / "yseries.csv").read_bytes()


def test_cascade_default_echo(tmp_path):
    doc = {"cascade": {"phase_points": 21, "draws": 20000}}
    assert run(tmp_path, "cascade", doc) == 0
    report = json.loads((tmp_path / "cascade.json").read_text())
    assert report["n_total"] == 118
    assert report["mc_check"]["agree_3sigma"]
    with open(tmp_path / "mse.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    mid = rows[len(rows) // 2]
    assert float(mid["phi_rad"]) == 0 and abs(float(mid["mean_rad"])) < 1e-9


def test_cascade_json_format(tmp_path):
    doc = {"cascade": {"sizes": [1, 2], "copies": [2, 1], "phase_points": 5, "mc_check": False}, "format": "json"}
    assert run(tmp_path, "cascade", doc) == 0
    table = json.loads((tmp_path / "mse.json").read_text())
    assert len(table["phi_rad"]) == 5


def test_recapture(tmp_path):
    doc = {"lattice": {"depth_sweep_er": [25.0, 50.0, 100.0]}}
    assert run(tmp_path, "recapture", doc) == 0
    report = json.loads((tmp_path / "recapture.json").read_text())
    assert report["p_at_zero"] == pytest.approx(1, abs=1e-6)
    times = [report["gaussian_time_us_by_depth"][k] for k in ("25.0", "50.0", "100.0")]
    # a deeper lattice localizes the atom more tightly, so it spreads out faster once released
    assert times[0] > times[1] > times[2]


def test_config_schema_defaults():
    for command in cli.COMMANDS:
        validate(default_config(command), command)
