from dataclasses import replace

import numpy as np
import pytest

from deltiss.control.control_models import LoopOptions, SynthesisOptions
from deltiss.control.errors import (
    BudgetExhaustedError,
    DetectabilityError,
    SetpointRejectedError,
    SynthesisError,
)
from deltiss.control.geometry import support
from deltiss.control.model import RnnModel, SectorParams, Setpoint, equilibrium
from deltiss.control.synthesis import (
    ControllerMode,
    certify_controller,
    certify_observer,
    check_detectability,
    check_stabilizability,
    controller_certify_tube,
    design_static_pipeline,
    parameters_update,
    setpoint_preconditions,
    static_setpoint_admissible,
)

TOL = 1e-7


def _unobservable_model() -> RnnModel:
    return RnnModel(
        A_x=np.diag([1.5, 0.5]),
        B_u=np.array([[1.0], [1.0]]),
        D_w=np.array([[0.1], [0.1]]),
        B_sigma=np.zeros((2, 1)),
        A_tilde=np.zeros((1, 2)),
        B_tilde=np.zeros((1, 1)),
        D_tilde=np.zeros((1, 1)),
        C=np.array([[0.0, 1.0]]),
    )


def test_pbh_checks():
    A = np.diag([1.5, 0.5])
    assert not check_detectability(A, np.array([[0.0, 1.0]]))
    assert check_detectability(A, np.array([[1.0, 0.0]]))
    assert not check_stabilizability(A, np.array([[0.0], [1.0]]))
    assert check_stabilizability(A, np.array([[1.0], [0.0]]))
    # stable modes never need to be observed
    assert check_detectability(np.diag([0.9, 0.5]), np.zeros((1, 2)))


def test_fixture_models_pass_the_rank_checks(d1_model, eight_state_model):
    for m in (d1_model, eight_state_model):
        assert check_detectability(m.A, m.C)
        assert check_stabilizability(m.A, m.B)


def test_parameters_update_walks_gamma_then_h():
    h, gamma = parameters_update(np.ones(2), 1.0, gamma_max=3.0, eps_h=0.1, eps_gamma=1.0)
    assert gamma == 2.0 and np.allclose(h, 1.0)
    h, gamma = parameters_update(h, 3.0, gamma_max=3.0, eps_h=0.1, eps_gamma=1.0)
    assert gamma == 1.0 and np.allclose(h, 1.1)


def test_undetectable_model_is_rejected(d1_bounds):
    m = _unobservable_model()
    with pytest.raises(DetectabilityError) as info:
        design_static_pipeline(m, d1_bounds, Setpoint(np.zeros(1), np.zeros(2), np.zeros(1)))
    assert info.value.cause == "detectability"


def test_budget_exhaustion_carries_a_transcript(d1_model, d1_bounds):
    opts = SynthesisOptions(loop=LoopOptions(budget=1))
    with pytest.raises(BudgetExhaustedError) as info:
        design_static_pipeline(d1_model, d1_bounds, equilibrium(d1_model, [0.0]), opts)
    assert info.value.transcript
    assert info.value.to_dict()["error"] == "BudgetExhaustedError"


@pytest.mark.slow
def test_observer_design_is_certified(d1_model, d1_bounds, d1_static):
    obs = d1_static.observer
    eigs = certify_observer(d1_model, d1_bounds, obs)
    assert min(eigs.values()) >= -TOL
    assert "observer_dissipation" in eigs
    assert "observer_rpi" in eigs
    assert np.all(np.diag(obs.S_o) > 0.0)


@pytest.mark.slow
def test_observer_error_dynamics(d1_model, d1_static):
    m, obs = d1_model, d1_static.observer
    rng = np.random.default_rng(4)
    x, x_hat = np.array([0.2, -0.1]), np.zeros(2)
    for _ in range(50):
        u = rng.uniform(-1.0, 1.0, 1)
        w = rng.uniform(-0.05, 0.05, 1)
        eta = rng.uniform(-0.01, 0.01, 1)
        y = m.output(x, eta)
        x_next, v = m.plant_step(x, u, w)
        x_hat_next = m.observer_step(obs.L, obs.L_tilde, x_hat, u, y)
        v_hat = m.A_tilde @ x_hat + m.B_tilde @ u + obs.L_tilde @ (y - m.C @ x_hat)
        e = x - x_hat
        expected = obs.A_L(m) @ e + m.D @ w - obs.L @ eta + m.B_q @ (m.q(v) - m.q(v_hat))
        assert np.allclose(x_next - x_hat_next, expected, atol=1e-12)
        x, x_hat = x_next, x_hat_next


@pytest.mark.slow
def test_static_design_is_certified(d1_model, d1_bounds, d1_static):
    d1_static.require_certified()
    ctrl = d1_static.controller
    assert ctrl.mode == ControllerMode.STATIC
    eigs = certify_controller(d1_model, d1_bounds, d1_static.observer, ctrl)
    assert min(eigs.values()) >= -TOL
    assert d1_static.transcript.outcomes["observer"] == "certified"
    assert d1_static.transcript.outcomes["controller/static"] == "certified"
    assert np.allclose(ctrl.control(ctrl.setpoint.x_bar), ctrl.setpoint.u_bar)


@pytest.mark.slow
def test_static_setpoint_admissibility(d1_model, d1_bounds, d1_static):
    ok, cause = static_setpoint_admissible(
        d1_model, d1_bounds, d1_static.observer, d1_static.controller, equilibrium(d1_model, [0.0])
    )
    assert ok and cause is None


def test_far_setpoint_leaves_the_sector_region(d1_model):
    sector = SectorParams.from_slopes([2.0], d1_model.activations)
    far = Setpoint(y_bar=np.array([5.0]), x_bar=np.array([5.0, 0.0]), u_bar=np.zeros(1))
    with pytest.raises(SetpointRejectedError) as info:
        setpoint_preconditions(d1_model, far, sector, sector)
    assert info.value.cause == "setpoint_controller_sector[0]"


def test_sector_precondition_admits_the_boundary(d1_model):
    sp = Setpoint(y_bar=np.array([0.1]), x_bar=np.array([0.3, 0.1]), u_bar=np.array([0.2]))
    v_eq = np.abs(sp.v_eq(d1_model))
    on_edge = SectorParams(np.array([2.0]), v_eq.copy())
    setpoint_preconditions(d1_model, sp, on_edge, on_edge)
    inside = SectorParams(np.array([2.0]), v_eq * (1.0 - 1e-9))
    with pytest.raises(SetpointRejectedError) as info:
        setpoint_preconditions(d1_model, sp, None, inside)
    assert info.value.cause == "setpoint_observer_sector[0]"


@pytest.mark.slow
def test_tube_design_shares_the_static_gain(d1_tube, d1_static):
    d1_tube.require_certified()
    assert d1_tube.mode == ControllerMode.TUBE
    assert np.allclose(d1_tube.controller.K, d1_static.controller.K)
    assert d1_tube.controller.setpoint is None
    terminal = d1_tube.terminal
    assert terminal.gamma_f > 0.0
    assert terminal.terminal_set.contains(terminal.setpoint.x_bar)
    assert terminal.cost(terminal.setpoint.x_bar) == 0.0


@pytest.mark.slow
def test_tightened_output_offsets(d1_model, d1_tube, d1_sets):
    _, Y = d1_sets
    tight = d1_tube.tube_sets()
    E_c, E_o = d1_tube.controller.rpi, d1_tube.observer.rpi
    for r in range(Y.n_rows):
        g = Y.G[r]
        expected = Y.b[r] - support(E_c, d1_model.C, g) - support(E_o, d1_model.C, g)
        assert tight.Y_tilde.b[r] == pytest.approx(expected, rel=1e-12)
        assert tight.Y_tilde.b[r] < Y.b[r]
    assert np.all(tight.U_tilde.b < 1.5)
    assert np.all(tight.locality.half_widths > 0.0)


@pytest.mark.slow
def test_reusing_a_gain_that_fails_the_tube_conditions(d1_model, d1_bounds, d1_static):
    broken = replace(d1_static.controller, K=d1_static.controller.K + 50.0)
    with pytest.raises(SynthesisError):
        controller_certify_tube(d1_model, d1_bounds, d1_static.observer, broken)
