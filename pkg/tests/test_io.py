import json
from pathlib import Path

import numpy as np
import pytest

import deltiss
from deltiss.control import io
from deltiss.control.errors import ConfigurationError, DesignCertificationError, SchemaError

FIXTURES = Path(deltiss.__file__).parent / "fixtures"

def _model_doc() -> dict:
    return json.loads((FIXTURES / "d1.json").read_text())


def test_fixture_models_load(d1_model, eight_state_model):
    assert (d1_model.n, d1_model.m, d1_model.p, d1_model.nu) == (2, 1, 1, 1)
    assert (eight_state_model.n, eight_state_model.nu) == (8, 5)
    doc = io.load_model_document(FIXTURES / "d1.json")
    bounds = io.disturbance_bounds(doc)
    assert bounds.Q_w0[0, 0] == 400.0


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.pop("A_x"),
        lambda d: d.update(A_tilde=[[0.5, 0.5, 0.5]]),
        lambda d: d.update(activations=["relu"]),
        lambda d: d.update(C="identity"),
    ],
)
def test_bad_model_documents_are_schema_errors(tmp_path, mutate):
    doc = _model_doc()
    mutate(doc)
    path = tmp_path / "model.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError):
        io.load_model(path)


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigurationError):
        io.load_model(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(SchemaError):
        io.load_model(broken)


def test_config_resolves_the_model_next_to_it(tmp_path):
    (tmp_path / "d1.json").write_text((FIXTURES / "d1.json").read_text())
    cfg = tmp_path / "run.cfg"
    cfg.write_text(json.dumps({"model": "d1.json"}))
    config = io.load_config(cfg)
    assert config.model == str((tmp_path / "d1.json").resolve())
    assert config.controller == "nmpc"
    assert config.reference()[0][0] == 0


def test_environment_overrides(d1_config, monkeypatch):
    monkeypatch.setenv("DELTISS_SEED", "17")
    monkeypatch.setenv("DELTISS_JOBS", "3")
    config = io.load_config(d1_config())
    assert (config.seed, config.jobs) == (17, 3)
    monkeypatch.setenv("DELTISS_JOBS", "many")
    with pytest.raises(ConfigurationError):
        io.load_config(d1_config())


def test_schedule_must_start_at_zero(d1_config):
    path = d1_config(schedule=[{"start": 5, "y_bar": [0.0]}])
    with pytest.raises(SchemaError):
        io.load_config(path)


def test_constraint_dimension_mismatch(d1_config, d1_model):
    config = io.load_config(d1_config(constraints={"input": {"lower": [-1, -1], "upper": [1, 1]}}))
    with pytest.raises(SchemaError):
        io.constraint_sets(config.constraints, d1_model)


def test_manifest_records_outputs_and_doubles_as_config(d1_config, tmp_path):
    config = io.load_config(d1_config())
    out = tmp_path / "out"
    artifact = io.write_json(out / "thing.json", {"a": 1})
    manifest_path = io.write_manifest(out, "inspect", config, {"thing": artifact})
    manifest = json.loads(manifest_path.read_text())
    assert manifest["tool"] == "deltiss"
    assert manifest["command"] == "inspect"
    assert manifest["outputs"]["thing"] == io.sha256_file(artifact)
    assert manifest["config_sha256"] == io.config_digest(config)
    assert io.load_config(manifest_path) == config


@pytest.mark.slow
def test_design_round_trip_is_exact(d1_static, d1_tube, tmp_path):
    for bundle in (d1_static, d1_tube):
        path = io.save_design(bundle, tmp_path / f"{bundle.mode.value}.json")
        loaded = io.load_design(path)
        assert loaded.mode == bundle.mode
        assert np.array_equal(loaded.controller.K, bundle.controller.K)
        assert np.array_equal(loaded.observer.P_o, bundle.observer.P_o)
        assert np.array_equal(loaded.observer.L_tilde, bundle.observer.L_tilde)
        assert loaded.controller.gamma_c == bundle.controller.gamma_c
        if bundle.terminal is not None:
            assert np.array_equal(loaded.terminal.P_f, bundle.terminal.P_f)


@pytest.mark.slow
def test_tampered_design_fails_certification(d1_static, tmp_path):
    path = io.save_design(d1_static, tmp_path / "design.json")
    doc = json.loads(path.read_text())
    doc["observer"]["gamma_o"] = 1e-6
    path.write_text(json.dumps(doc))
    with pytest.raises(DesignCertificationError):
        io.load_design(path)
    assert io.load_design(path, certify=False).observer.gamma_o == 1e-6
