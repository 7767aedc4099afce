import csv
import json

import numpy as np
import pytest

from deltiss.cli import main


def test_usage_errors_exit_with_two(capsys):
    assert main([]) == 2
    assert main(["synthesize"]) == 2
    assert main(["inspect", "--config", "x.cfg", "--seed", "not-a-number"]) == 2


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == 0
    assert "sweep-roa" in capsys.readouterr().out


def test_missing_config_reports_a_json_error(tmp_path, capsys):
    assert main(["inspect", "--config", str(tmp_path / "nope.cfg")]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "ConfigurationError"
    assert error["cause"] == "path"


def test_inspect_writes_summary_and_manifest(d1_config, tmp_path):
    out = tmp_path / "inspect"
    assert main(["inspect", "--config", str(d1_config()), "--out", str(out)]) == 0
    info = json.loads((out / "inspect.json").read_text())
    assert info["dimensions"] == {"n": 2, "m": 1, "p": 1, "d": 1, "nu": 1}
    assert info["detectable"] and info["stabilizable"]
    assert info["setpoint"]["y_bar"] == [0.0]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "inspect"
    assert set(manifest["outputs"]) == {"inspect"}


@pytest.mark.slow
def test_synthesize_then_verify_and_simulate(d1_config, tmp_path):
    config = str(d1_config())
    design_dir = tmp_path / "design"
    assert main(["synthesize", "--config", config, "--mode", "static", "--out", str(design_dir)]) == 0
    design = design_dir / "design.json"
    assert design.is_file()
    assert json.loads((design_dir / "transcript.json").read_text())["attempts"]

    verify_dir = tmp_path / "verify"
    assert main(["verify", "--config", config, "--design", str(design), "--out", str(verify_dir)]) == 0
    assert (verify_dir / "verification.md").is_file()
    assert (verify_dir / "verification.html").is_file()

    sim_dir = tmp_path / "sim"
    assert main(["simulate", "--config", config, "--design", str(design), "--out", str(sim_dir)]) == 0
    summary = json.loads((sim_dir / "summary.json").read_text())
    assert "boundedness_radius" in summary
    assert (sim_dir / "trajectory.csv").is_file()


@pytest.mark.slow
def test_synthesis_failure_exits_with_one(d1_config, tmp_path, capsys):
    config = str(d1_config(synthesis={"loop": {"budget": 1}}))
    out = tmp_path / "fail"
    assert main(["synthesize", "--config", config, "--mode", "static", "--out", str(out)]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "BudgetExhaustedError"
    assert (out / "transcript.json").is_file()


@pytest.mark.slow
def test_zero_noise_run_at_the_setpoint_is_constant(d1_config, tmp_path):
    config = str(d1_config(disturbance={"policy": "zero"}))
    out = tmp_path / "still"
    assert main(["simulate", "--config", config, "--out", str(out)]) == 0
    with (out / "trajectory.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 40
    columns = [c for c in rows[0] if c.startswith(("x[", "xhat[", "y[", "u["))]
    assert columns
    for column in columns:
        values = np.array([float(r[column]) for r in rows])
        assert np.ptp(values) <= 1e-12, column


@pytest.mark.slow
@pytest.mark.parametrize(
    "command", [["synthesize", "--mode", "static"], ["simulate"], ["verify", "--samples", "300"]]
)
def test_replaying_a_manifest_reproduces_every_output(d1_config, tmp_path, command):
    first, replay = tmp_path / "first", tmp_path / "replay"
    assert main([*command, "--config", str(d1_config()), "--out", str(first)]) == 0
    assert main([*command, "--config", str(first / "manifest.json"), "--out", str(replay)]) == 0
    original = json.loads((first / "manifest.json").read_text())
    replayed = json.loads((replay / "manifest.json").read_text())
    assert original["outputs"]
    assert replayed["outputs"] == original["outputs"]


@pytest.mark.slow
def test_empty_tightened_set_still_writes_the_transcript(d1_config, tmp_path, capsys):
    config = str(d1_config(constraints={"output": {"lower": [-1e-4], "upper": [1e-4]}}))
    out = tmp_path / "empty"
    assert main(["synthesize", "--config", config, "--mode", "tube", "--shared-gain", "--out", str(out)]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "EmptyTightenedSetError"
    assert isinstance(json.loads((out / "transcript.json").read_text()), list)
    assert (out / "manifest.json").is_file()
