import csv

import numpy as np
import pytest

from deltiss.control.control_models import RoaGridSpec
from deltiss.control.errors import ConfigurationError
from deltiss.control.sim import (
    DisturbancePolicy,
    RoaMap,
    boundedness_radius,
    output_tube_fraction,
    roa_row,
    roa_sweep,
    roa_variants,
    run_closed_loop,
    verify_design,
)


@pytest.mark.parametrize("mode", ["zero", "uniform", "boundary"])
def test_disturbances_stay_in_their_sets(d1_bounds, mode):
    policy = DisturbancePolicy(mode, d1_bounds, seed=3)
    for _ in range(200):
        w, eta = policy.sample()
        assert d1_bounds.w_set.contains(w, 1e-9)
        assert d1_bounds.eta_set.contains(eta, 1e-9)
        if mode == "zero":
            assert not w.any() and not eta.any()
        if mode == "boundary":
            assert d1_bounds.w_set.level(w) == pytest.approx(1.0)


def test_disturbance_policy_errors(d1_bounds):
    with pytest.raises(ConfigurationError):
        DisturbancePolicy("gaussian", d1_bounds)
    with pytest.raises(ConfigurationError):
        DisturbancePolicy("worst-case", d1_bounds)


def test_disturbance_streams_are_seeded(d1_bounds):
    a = DisturbancePolicy("uniform", d1_bounds, seed=9)
    b = DisturbancePolicy("uniform", d1_bounds, seed=9)
    for _ in range(10):
        assert np.array_equal(a.sample()[0], b.sample()[0])


def test_roa_map_bookkeeping(tmp_path):
    values = np.array([-0.1, 0.0, 0.1])
    feasible = {
        "static": np.array([[0, 1, 0], [1, 1, 0], [0, 0, 0]], dtype=bool),
        "nmpc(3)": np.array([[0, 1, 1], [1, 1, 1], [0, 1, 1]], dtype=bool),
        "nmpc(10)": np.array([[1, 1, 1], [1, 1, 1], [0, 1, 0]], dtype=bool),
    }
    roa = RoaMap(values, values, ["static", "nmpc(3)", "nmpc(10)"], feasible)
    assert roa.counts() == {"static": 3, "nmpc(3)": 7, "nmpc(10)": 7}
    assert roa.counterexamples() == [(0.1, 0.1, "nmpc(3)", "nmpc(10)")]
    with roa.to_csv(tmp_path / "roa.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["ybar0", "ybar", "variant", "feasible"]
    assert len(rows) == 1 + 9 * 3
    assert "| static | 3 / 9 |" in roa.to_markdown()


def test_roa_variants():
    grid = RoaGridSpec(horizons=[10, 3, 3])
    assert roa_variants(grid) == ["static", "nmpc(3)", "nmpc(10)"]
    assert roa_variants(grid, with_tube=False) == ["static"]


@pytest.mark.slow
def test_closed_loop_argument_checks(d1_static, d1_tube, d1_bounds):
    policy = DisturbancePolicy("zero", d1_bounds)
    with pytest.raises(ConfigurationError):
        run_closed_loop(d1_tube, "static", [(0, np.zeros(1))], policy, 5)
    with pytest.raises(ConfigurationError):
        run_closed_loop(d1_static, "nmpc", [(0, np.zeros(1))], policy, 5)
    with pytest.raises(ConfigurationError):
        run_closed_loop(d1_static, "static", [(3, np.zeros(1))], policy, 5)
    with pytest.raises(ConfigurationError):
        run_closed_loop(d1_static, "static", [(0, np.zeros(1))], policy, 5, x_hat0=np.full(2, 5.0))


@pytest.mark.slow
def test_static_loop_stays_in_its_tube(d1_static, d1_bounds, tmp_path):
    policy = DisturbancePolicy("boundary", d1_bounds, seed=1)
    traj = run_closed_loop(d1_static, "static", [(0, np.zeros(1))], policy, 300)
    assert traj.steps == 300
    assert not traj.has_nominal
    assert traj.tube_member.all()
    assert traj.locality_member.all()
    sp = d1_static.controller.setpoint
    assert boundedness_radius(traj, sp.x_bar) < 1.0
    assert output_tube_fraction(d1_static, traj) == 1.0
    path = traj.to_csv(tmp_path / "trajectory.csv")
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:5] == ["k", "x[0]", "x[1]", "xhat[0]", "xhat[1]"]
    assert len(rows) == 301


@pytest.mark.slow
def test_nmpc_loop_tracks_a_setpoint_change(d1_tube, d1_bounds):
    policy = DisturbancePolicy("uniform", d1_bounds, seed=2)
    reference = [(0, np.zeros(1)), (20, np.array([0.1]))]
    traj = run_closed_loop(d1_tube, "nmpc", reference, policy, 40, horizon=3)
    assert traj.has_nominal
    assert set(traj.fhocp_status) <= {"optimal", "max_iter"}
    assert traj.tube_member.all()
    assert np.all(traj.constraint_violation <= 1e-6)
    assert all(c is not False for c in traj.candidate_feasible)
    assert "fhocp_status" in traj.columns()


@pytest.mark.slow
def test_nmpc_stays_feasible_over_a_long_schedule(d1_tube, d1_bounds):
    policy = DisturbancePolicy("boundary", d1_bounds, seed=5)
    reference = [
        (0, np.zeros(1)),
        (125, np.array([0.25])),
        (250, np.array([-0.2])),
        (375, np.array([0.1])),
    ]
    traj = run_closed_loop(d1_tube, "nmpc", reference, policy, 500, horizon=10)
    assert traj.steps == 500
    assert set(traj.fhocp_status) <= {"optimal", "max_iter"}
    assert all(c is not False for c in traj.candidate_feasible[1:])
    assert np.all(traj.constraint_violation <= 1e-6)
    assert traj.tube_member.all()


@pytest.mark.slow
def test_verification_finds_no_violations(d1_static, d1_tube):
    static_report = verify_design(d1_static, n_samples=10_000, seed=0)
    assert static_report.passed, static_report.to_markdown()
    names = {s.name for s in static_report.suites}
    assert {"observer_rpi", "observer_dissipation", "controller_rpi", "sector_condition"} <= names
    tube_report = verify_design(d1_tube, n_samples=10_000, seed=0)
    assert tube_report.passed, tube_report.to_markdown()
    assert tube_report.suite("terminal_invariance").evaluated > 0


@pytest.mark.slow
def test_roa_rows_nest(d1_static, d1_tube):
    grid = RoaGridSpec(y_min=-0.2, y_max=0.2, points=3, horizons=[3], steps=15)
    row = roa_row(d1_static, d1_tube, grid, 1)
    assert set(row) == {"static", "nmpc(3)"}
    assert len(row["static"]) == 3
    # the reference setpoint itself is always trackable
    assert row["static"][1] and row["nmpc(3)"][1]
    roa = roa_sweep(d1_static, d1_tube, grid)
    assert roa.counterexamples() == []
    with pytest.raises(ConfigurationError):
        roa_row(d1_static, d1_tube, grid, 5)


@pytest.mark.slow
def test_roa_nesting_on_the_full_grid(d1_static, d1_tube):
    grid = RoaGridSpec(y_min=-0.5, y_max=0.5, points=21, horizons=[3, 10], steps=200)
    roa = roa_sweep(d1_static, d1_tube, grid, policy_mode="boundary", jobs=4)
    assert roa.variants == ["static", "nmpc(3)", "nmpc(10)"]
    assert roa.feasible["static"].shape == (21, 21)
    assert roa.counterexamples() == []
    assert roa.feasible["static"][10, 10]
