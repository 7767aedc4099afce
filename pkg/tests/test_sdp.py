import numpy as np
import pytest

from deltiss.control import sdp
from deltiss.control.errors import SdpError
from deltiss.control.sdp import LmiProblem, LmiStatus


def _lyapunov_problem(F: np.ndarray) -> LmiProblem:
    n = F.shape[0]
    prob = LmiProblem("lyapunov")
    prob.symmetric("P", n)
    prob.require_psd("positive", lambda v: v["P"] - np.eye(n))
    prob.require_psd("decrease", lambda v: v["P"] - F.T @ v["P"] @ F - np.eye(n))
    prob.minimize(lambda v: sdp.trace(v["P"]))
    return prob


def test_lyapunov_problem_is_feasible_and_certified():
    F = np.array([[0.5, 0.3], [0.0, 0.8]])
    sol = sdp.solve(_lyapunov_problem(F))
    assert sol.status == LmiStatus.FEASIBLE
    P = sol.values["P"]
    assert np.allclose(P, P.T)
    assert sdp.min_eig(P - F.T @ P @ F) > 0.0
    assert all(e >= -1e-7 for e in sol.block_min_eigs.values())
    assert sol.objective_value == pytest.approx(np.trace(P), rel=1e-6)


def test_unstable_lyapunov_problem_is_infeasible():
    sol = sdp.solve(_lyapunov_problem(np.array([[1.2]])))
    assert not sol.feasible
    assert sol.values == {}


def test_diagonal_variables_come_back_as_matrices():
    prob = LmiProblem("diag")
    prob.diagonal("S", 3)
    prob.require_psd("lower", lambda v: v["S"] - np.eye(3))
    prob.minimize(lambda v: sdp.trace(v["S"]))
    sol = sdp.solve(prob)
    assert sol.feasible
    assert sol.values["S"].shape == (3, 3)
    assert np.allclose(sol.values["S"], np.diag(np.diag(sol.values["S"])))


def test_margin_is_enforced():
    prob = LmiProblem("margin")
    prob.scalar("t")
    prob.require_psd("floor", lambda v: v["t"], margin=0.5)
    prob.minimize(lambda v: v["t"])
    sol = sdp.solve(prob)
    assert sol.values["t"][0, 0] == pytest.approx(0.5, abs=1e-6)


def test_duplicate_declarations_are_rejected():
    prob = LmiProblem()
    prob.symmetric("P", 2)
    with pytest.raises(SdpError):
        prob.symmetric("P", 2)
    prob.require_psd("a", lambda v: v["P"])
    with pytest.raises(SdpError):
        prob.require_psd("a", lambda v: v["P"])


def test_problem_without_blocks_is_rejected():
    prob = LmiProblem("empty")
    prob.symmetric("P", 2)
    with pytest.raises(SdpError):
        prob.to_cvxpy()


def test_unknown_solver_is_rejected():
    with pytest.raises(SdpError):
        sdp.select_solver("NO_SUCH_SOLVER")


def test_check_psd():
    assert sdp.check_psd(np.eye(2))
    assert not sdp.check_psd(np.diag([1.0, -1e-3]))
    assert sdp.check_psd(np.diag([1.0, -1e-9]))
    with pytest.raises(SdpError):
        sdp.check_psd(np.array([[1.0, 0.2], [0.0, 1.0]]))


def test_certify_evaluates_every_block():
    F = np.array([[0.5]])
    prob = _lyapunov_problem(F)
    eigs = sdp.certify(prob, {"P": np.array([[2.0]])})
    assert eigs["positive"] == pytest.approx(1.0)
    assert eigs["decrease"] == pytest.approx(2.0 - 0.5 - 1.0)


def test_sym_blocks_mirrors_upper_entries():
    M = sdp.sym_blocks([1, 2], {(0, 0): np.eye(1), (0, 1): np.array([[1.0, 2.0]])})
    assert M.shape == (3, 3)
    assert np.allclose(M, M.T)
    assert np.allclose(M[1:, 0], [1.0, 2.0])
    assert np.allclose(M[1:, 1:], 0.0)


def test_compiled_conic_form():
    form = sdp.compile(_lyapunov_problem(np.array([[0.5, 0.0], [0.0, 0.5]])))
    assert form.psd_sizes
    assert form.n_vars >= 3
    dump = form.to_triplets()
    assert dump.startswith(f"# solver={form.solver}")
    assert any(line.startswith("A ") for line in dump.splitlines())
