#!/usr/bin/env python3
"""
CochainFEM - Command-Line Tests
===============================
Exit codes with a mocked controller, plus small end-to-end runs.

Run with: pytest tests/test_cli.py
"""

import csv
import json
import os
import sys

import pytest

# Add project root to path
TEST_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_ROOT = os.path.dirname(TEST_DIR)
sys.path.insert(0, PROJECT_ROOT)

from cochainfem.main import main  # noqa: E402
from cochainfem.report_writer import RunReport  # noqa: E402
from cochainfem.utils import InputError, SolverError  # noqa: E402


@pytest.fixture
def quiet(mocker):
    """Keep handlers off the package logger."""
    return mocker.patch("cochainfem.main.setup_logging")


@pytest.fixture
def config_file(tmp_path):
    def write(data):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        return str(path)
    return write


@pytest.fixture
def controller(mocker):
    mock = mocker.patch("cochainfem.main.ExperimentController")
    mock.return_value.run.return_value = RunReport("solve")
    return mock


def _args(command, config, out, *extra):
    return [command, "--config", config, "--out", str(out), *extra]


# =============================================================================
# EXIT CODES
# =============================================================================

def test_success_returns_zero(quiet, controller, config_file, tmp_path):
    """Test a run whose checks pass exits 0."""
    assert main(_args("solve", config_file({}), tmp_path / "out")) == 0
    controller.return_value.run.assert_called_once_with("solve")


def test_missing_config_returns_one(quiet, controller, tmp_path):
    """Test an unreadable configuration exits 1 before the controller starts."""
    assert main(_args("solve", str(tmp_path / "missing.json"), tmp_path / "out")) == 1
    controller.assert_not_called()


def test_negative_seed_returns_one(quiet, controller, config_file, tmp_path):
    """Test a negative seed override is a configuration error."""
    assert main(_args("verify", config_file({}), tmp_path / "out", "--seed", "-3")) == 1
    controller.assert_not_called()


def test_seed_override(quiet, controller, config_file, tmp_path):
    """Test --seed replaces the configured seed."""
    assert main(_args("verify", config_file({"seed": 1}), tmp_path / "out", "--seed", "7")) == 0
    config = controller.call_args[0][0]
    assert config.seed == 7


def test_failed_check_returns_two(quiet, controller, config_file, tmp_path):
    """Test a failed check exits 2."""
    report = RunReport("verify")
    report.add_check("cartan[0]", 1.0, 1e-8)
    controller.return_value.run.return_value = report
    assert main(_args("verify", config_file({}), tmp_path / "out")) == 2


@pytest.mark.parametrize("error, code", [
    (SolverError("singular"), 3),
    (InputError("bad region"), 1),
    (RuntimeError("unexpected"), 3),
])
def test_errors_map_to_codes(quiet, controller, config_file, tmp_path, error, code):
    """Test package errors use their family's exit code and others exit 3."""
    controller.return_value.run.side_effect = error
    assert main(_args("solve", config_file({}), tmp_path / "out")) == code


def test_unknown_command_rejected(quiet, config_file, tmp_path):
    """Test argparse rejects unknown commands."""
    with pytest.raises(SystemExit) as exc:
        main(_args("plot", config_file({}), tmp_path / "out"))
    assert exc.value.code == 2


# =============================================================================
# END TO END
# =============================================================================

def _read_report(out):
    with open(out / "report.json", encoding="utf-8") as f:
        return json.load(f)


def test_solve_end_to_end(quiet, config_file, tmp_path):
    """Test solve writes a passing report and one CSV row per node."""
    out = tmp_path / "solve"
    config = config_file({
        "problem": {"density": "nonlinear_wave_poisson", "epsilon": -1, "potential": [0, 0, 0, 0, 0.25]},
        "mesh": {"t_range": [0.0, 0.3], "x_range": [0.0, 1.0], "M": 3, "N": 4},
    })
    assert main(_args("solve", config, out)) == 0
    report = _read_report(out)
    assert report["passed"] is True
    assert report["results"]["solve"]["converged"] is True
    with open(out / "solution.csv", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4 * 5
    assert set(rows[0]) == {"node", "t", "x", "value_0"}


def test_verify_end_to_end(quiet, config_file, tmp_path):
    """Test verify runs every check on a small wave problem and passes."""
    out = tmp_path / "verify"
    config = config_file({
        "seed": 2,
        "problem": {"density": "shift_symmetric_wave", "epsilon": -1},
        "mesh": {"t_range": [0.0, 0.5], "x_range": [0.0, 1.0], "M": 4, "N": 5},
        "verify": {"regions": [[0, 3, 0, 3], [1, 4, 1, 5]], "generators": ["shift", "cube"],
                   "random_probes": 1, "max_workers": 2},
    })
    assert main(_args("verify", config, out)) == 0
    report = _read_report(out)
    names = [c["name"] for c in report["checks"]]
    assert "noether[1,shift]" in names
    assert "equivariance_control[cube]" in names
    assert "stencil" in names
    assert (out / "noether.csv").exists() and (out / "multisymplectic.csv").exists()


def test_simulate_end_to_end(quiet, config_file, tmp_path):
    """Test simulate conserves energy and the rotation momentum of a linear pair."""
    out = tmp_path / "simulate"
    config = config_file({
        "problem": {"density": "so2_pair", "epsilon": -1, "potential": [0.0, 0.5]},
        "mesh": {"x_range": [0.0, 1.0], "N": 8, "periodic_x": True},
        "boundary": {"kind": "traveling_wave", "amplitude": 0.1, "wavenumber": 6.283185307179586},
        "verify": {"generators": ["rotation"], "random_probes": 1},
        "canonical": {"dt": 0.05, "steps": 20, "symplecticity_steps": 2, "snapshots": True, "snapshot_every": 10},
    })
    assert main(_args("simulate", config, out)) == 0
    report = _read_report(out)
    assert {"energy_drift", "momentum_drift[rotation]", "symplecticity"} <= {c["name"] for c in report["checks"]}
    with open(out / "snapshots.json", encoding="utf-8") as f:
        assert [s["step"] for s in json.load(f)["snapshots"]] == [0, 10, 20]


def test_converge_without_finite_rates_fails_check(quiet, mocker, config_file, tmp_path):
    """Test a study whose errors vanish records a failed rate check instead of crashing."""
    rows = [{"n": 8, "h": 0.125, "error": 0.0, "rate": None},
            {"n": 16, "h": 0.0625, "error": 0.0, "rate": None}]
    mocker.patch("cochainfem.main.covariant.manufactured_study", return_value=rows)
    out = tmp_path / "converge"
    config = config_file({"problem": {"density": "manufactured", "epsilon": 1},
                          "study": {"studies": ["manufactured"], "levels": [8, 16]}})
    assert main(_args("converge", config, out)) == 2
    check = _read_report(out)["checks"][0]
    assert check["name"] == "manufactured_rate"
    assert check["passed"] is False
    assert check["measured"] != check["measured"]


def test_shipped_converge_config_passes(quiet, tmp_path):
    """Test every study check of configs/converge.json passes as shipped."""
    from cochainfem.config import CONFIG_DIR
    out = tmp_path / "converge"
    code = main(_args("converge", str(CONFIG_DIR / "converge.json"), out))
    report = _read_report(out)
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    assert failed == []
    assert code == 0
    names = {c["name"] for c in report["checks"]}
    assert {"manufactured_rate", "noether_current_rate[l2_distance]", "noether_current_rate[dual_norm]",
            "cartan_ring_rate", "phase_rate", "phase_prediction", "trajectory_equivalence_rate"} <= names
    assert [row["n"] for row in report["tables"]["cartan_ring"]] == [32, 64, 128]
    for study in ("manufactured", "noether_current", "cartan_ring", "phase", "trajectory_equivalence"):
        assert (out / f"convergence_{study}.csv").exists()
