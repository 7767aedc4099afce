import numpy as np

from deltiss.control.control_models import NmpcOptions
from deltiss.control.nmpc import _sqp


class _ScriptedInstance:
    """Stand-in FHOCP whose QP proposes ``X + min(move, radius)`` and whose merit is ``sum(X)``."""

    def __init__(self, move: float, max_iter: int = 40) -> None:
        self.options = NmpcOptions(max_iter=max_iter)
        self.x_hat = np.zeros(1)
        self.subproblem = self
        self.move = move
        self.radii: list[float] = []

    def solve(self, x_hat, X, U, radius, cost_weight):
        self.radii.append(radius)
        return X + min(self.move, radius), U

    def merit(self, X, U, cost_weight) -> float:
        return float(np.sum(X))

    def max_violation(self, X, U) -> float:
        return 1.0


def test_stalled_line_search_is_not_reported_as_converged():
    inst = _ScriptedInstance(move=1.0)
    res = _sqp(inst, np.ones((2, 1)), np.zeros((1, 1)), 1.0)
    assert not res.converged
    assert min(inst.radii) < inst.options.kkt_tol
    assert res.iterations == inst.options.max_iter
    assert np.array_equal(res.X, np.ones((2, 1)))


def test_zero_step_at_full_radius_converges():
    inst = _ScriptedInstance(move=0.0)
    res = _sqp(inst, np.ones((2, 1)), np.zeros((1, 1)), 1.0)
    assert res.converged
    assert res.step == 0.0
    assert res.iterations == 1
