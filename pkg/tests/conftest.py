import json
from pathlib import Path

import numpy as np
import pytest

import deltiss
from deltiss.control import io
from deltiss.control.control_models import SynthesisOptions
from deltiss.control.geometry import Polytope
from deltiss.control.model import DisturbanceBounds, equilibrium
from deltiss.control.synthesis import design_static_pipeline, design_tube_pipeline

FIXTURES = Path(deltiss.__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def d1_model():
    return io.load_model(FIXTURES / "d1.json")


@pytest.fixture(scope="session")
def eight_state_model():
    return io.load_model(FIXTURES / "eight_state.json")


@pytest.fixture(scope="session")
def d1_bounds():
    return DisturbanceBounds(np.array([[400.0]]), np.array([[1e4]]))


@pytest.fixture(scope="session")
def d1_sets():
    return Polytope.from_box([-1.5], [1.5]), Polytope.from_box([-0.8], [0.8])


@pytest.fixture(scope="session")
def d1_static(d1_model, d1_bounds, d1_sets):
    U, Y = d1_sets
    return design_static_pipeline(
        d1_model, d1_bounds, equilibrium(d1_model, [0.0]), SynthesisOptions(), U, Y
    )


@pytest.fixture(scope="session")
def d1_tube(d1_model, d1_bounds, d1_sets, d1_static):
    """Tube bundle sharing the static observer and gain."""
    U, Y = d1_sets
    return design_tube_pipeline(
        d1_model,
        d1_bounds,
        equilibrium(d1_model, [0.0]),
        SynthesisOptions(),
        U,
        Y,
        controller=d1_static.controller,
        observer=d1_static.observer,
    )


@pytest.fixture
def d1_config(tmp_path):
    """A run configuration pointing at the bundled D1 model, writing into ``tmp_path``."""

    def write(**overrides) -> Path:
        config = {
            "model": str(FIXTURES / "d1.json"),
            "y_bar": [0.0],
            "controller": "static",
            "steps": 40,
            "horizon": 3,
            "out_dir": str(tmp_path / "out"),
            "verify_samples": 500,
            "constraints": {
                "input": {"lower": [-1.5], "upper": [1.5]},
                "output": {"lower": [-0.8], "upper": [0.8]},
            },
            "disturbance": {"policy": "uniform"},
            "roa": {"points": 3, "horizons": [3], "steps": 20},
        }
        config.update(overrides)
        path = tmp_path / "run.cfg"
        path.write_text(json.dumps(config))
        return path

    return write
