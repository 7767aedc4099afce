import math

import numpy as np
import pytest

from deltiss.control.errors import ModelError, SetpointInfeasibleError
from deltiss.control.model import (
    TANH,
    DisturbanceBounds,
    RnnModel,
    SectorParams,
    SigmoidSpec,
    equilibrium,
    sector_bound,
    sigmoid_from_kind,
)


@pytest.mark.parametrize("h", np.geomspace(1.0, 100.0, 101)[1:].tolist())
def test_tanh_sector_bound_matches_closed_form(h):
    # 1 - tanh'(v) = tanh(v)^2 = 1/h
    assert sector_bound(TANH, h) == pytest.approx(math.atanh(1.0 / math.sqrt(h)), abs=1e-9)


def test_sector_bound_edge_values():
    assert sector_bound(TANH, 1.0) == math.inf
    with pytest.raises(ModelError):
        sector_bound(TANH, 0.9)


def test_sector_bound_shrinks_as_h_grows():
    bounds = [sector_bound(TANH, h) for h in (1.2, 1.5, 2.0, 3.0, 1e4)]
    assert all(a > b for a, b in zip(bounds, bounds[1:]))
    assert 0.0 < bounds[-1] < 0.011


@pytest.mark.parametrize("h", [1.0, 1.5, 2.0, 4.0])
def test_incremental_sector_holds_inside_the_bound(h):
    v_bar = sector_bound(TANH, h)
    # h = 1 is the global sector; sample a range well into saturation
    reach = 20.0 if math.isinf(v_bar) else v_bar
    rng = np.random.default_rng(1)
    v1 = rng.uniform(-reach, reach, 100_000)
    v2 = rng.uniform(-reach, reach, 100_000)
    dq = (v1 - np.tanh(v1)) - (v2 - np.tanh(v2))
    dv = v1 - v2
    assert np.all(dq * (dv - h * dq) >= -1e-12 * max(1.0, reach) ** 2)


def test_sector_params():
    sector = SectorParams.from_slopes([1.0, 2.0], [TANH, TANH])
    assert sector.active == (1,)
    assert np.allclose(sector.H, np.diag([1.0, 2.0]))
    bumped = sector.incremented(0.1, [TANH, TANH])
    assert np.allclose(bumped.h, [1.1, 2.1])
    assert bumped.active == (0, 1)
    with pytest.raises(ModelError):
        SectorParams.from_slopes([1.0], [TANH, TANH])


def test_activation_assumption_checks():
    TANH.check_assumptions()
    wavy = SigmoidSpec("wavy", np.sin, np.cos, lambda v: -np.sin(v))
    with pytest.raises(ModelError):
        wavy.check_assumptions()
    with pytest.raises(ModelError):
        sigmoid_from_kind("relu")


@pytest.mark.parametrize("fixture", ["d1_model", "eight_state_model"])
def test_reformulated_step_agrees_with_original(fixture, request):
    m = request.getfixturevalue(fixture)
    rng = np.random.default_rng(7)
    x = np.zeros(m.n)
    for _ in range(1000):
        u = rng.uniform(-1.5, 1.5, m.m)
        w = rng.uniform(-0.05, 0.05, m.d)
        x_next, _ = m.plant_step(x, u, w)
        assert np.allclose(x_next, m.plant_step_original(x, u, w), atol=1e-12, rtol=0.0)
        x = x_next


def test_reformulated_matrices(d1_model):
    m = d1_model
    assert np.allclose(m.A, m.A_x + m.B_sigma @ m.A_tilde)
    assert np.allclose(m.B, m.B_u + m.B_sigma @ m.B_tilde)
    assert np.allclose(m.D, m.D_w + m.B_sigma @ m.D_tilde)
    assert np.allclose(m.B_q, -m.B_sigma)


def test_nominal_jacobians_match_finite_differences(d1_model):
    m = d1_model
    x = np.array([0.3, -0.2])
    u = np.array([0.4])
    A_k, B_k = m.nominal_jacobians(x, u)
    step = 1e-6
    fd_A = np.column_stack(
        [(m.nominal_step(x + step * e, u) - m.nominal_step(x - step * e, u)) / (2 * step) for e in np.eye(m.n)]
    )
    fd_B = (m.nominal_step(x, u + step) - m.nominal_step(x, u - step)) / (2 * step)
    assert np.allclose(A_k, fd_A, atol=1e-8)
    assert np.allclose(B_k[:, 0], fd_B, atol=1e-8)


@pytest.mark.parametrize("y_bar", [0.0, 0.25, -0.2, 0.1])
def test_equilibrium_residual(d1_model, y_bar):
    m = d1_model
    sp = equilibrium(m, [y_bar])
    assert np.linalg.norm(sp.x_bar - m.nominal_step(sp.x_bar, sp.u_bar)) <= 1e-9
    assert m.C @ sp.x_bar == pytest.approx([y_bar], abs=1e-9)
    assert np.allclose(sp.v_eq(m), m.A_tilde @ sp.x_bar + m.B_tilde @ sp.u_bar)


def test_equilibrium_dimension_mismatch(d1_model):
    with pytest.raises(SetpointInfeasibleError):
        equilibrium(d1_model, [0.0, 0.0])


def test_model_shape_errors():
    base = dict(
        A_x=np.eye(2),
        B_u=np.ones((2, 1)),
        D_w=np.ones((2, 1)),
        B_sigma=np.ones((2, 1)),
        A_tilde=np.ones((1, 2)),
        B_tilde=np.ones((1, 1)),
        D_tilde=np.ones((1, 1)),
        C=np.array([[1.0, 0.0]]),
    )
    RnnModel(**base)
    with pytest.raises(ModelError):
        RnnModel(**{**base, "A_tilde": np.ones((2, 2))})
    with pytest.raises(ModelError):
        RnnModel(**{**base, "C": np.ones((1, 3))})
    with pytest.raises(ModelError):
        RnnModel(**base, activations=(TANH, TANH))
    with pytest.raises(ModelError):
        RnnModel(**{**base, "A_x": np.array([[np.nan, 0.0], [0.0, 1.0]])})


def test_disturbance_bounds_dimension_check(d1_model):
    DisturbanceBounds(np.array([[400.0]]), np.array([[1e4]])).check_dims(d1_model)
    with pytest.raises(ModelError):
        DisturbanceBounds(np.eye(2), np.array([[1e4]])).check_dims(d1_model)
    scaled = DisturbanceBounds(np.array([[400.0]]), np.array([[1e4]])).scaled(2.0)
    assert scaled.Q_w0[0, 0] == pytest.approx(100.0)
