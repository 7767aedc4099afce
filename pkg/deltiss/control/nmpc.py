"""Finite-horizon optimal control problem and the receding-horizon tube controller.

The FHOCP is solved by sequential quadratic programming in multiple-shooting form: the
cost, the ellipsoids and the polytopes are convex and enter every subproblem exactly, only
the nominal dynamics are linearized. Subproblems are elastic (ℓ1-penalized slacks) so an
iterate always exists, and a trust region plus a backtracking line search on the penalty
merit keep the iteration stable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import cvxpy as cp
import numpy as np

from deltiss.control import sdp
from deltiss.control.control_models import NmpcOptions
from deltiss.control.errors import ConfigurationError, FhocpInfeasibleError, FhocpSolverError
from deltiss.control.geometry import Box, Ellipsoid
from deltiss.control.model import RnnModel, Setpoint
from deltiss.control.synthesis import (
    ControllerDesign,
    ControllerMode,
    DesignBundle,
    TerminalIngredients,
    TightenedSets,
)

logger = logging.getLogger(__name__)


class FhocpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass(frozen=True, eq=False)
class FhocpSpec:
    """Horizon, weights, terminal ingredients and tightened sets of one FHOCP."""

    model: RnnModel
    controller: ControllerDesign
    horizon: int
    Lambda_x: np.ndarray
    Lambda_u: np.ndarray
    terminal: TerminalIngredients
    tight: TightenedSets
    setpoint: Setpoint
    init_ellipsoid: Ellipsoid

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ConfigurationError(f"horizon must be >= 1, got {self.horizon}", cause="horizon")

    @cached_property
    def locality(self) -> Box:
        return self.tight.locality

    @cached_property
    def terminal_set(self) -> Ellipsoid:
        return self.terminal.terminal_set

    def auxiliary_input(self, x_tilde: np.ndarray) -> np.ndarray:
        """Terminal law ``ū + K (x̃ − x̄)``."""
        return self.setpoint.u_bar + self.controller.K @ (x_tilde - self.setpoint.x_bar)

    def stage_cost(self, x_tilde: np.ndarray, u_tilde: np.ndarray) -> float:
        dx = x_tilde - self.setpoint.x_bar
        du = u_tilde - self.setpoint.u_bar
        return float(dx @ self.Lambda_x @ dx + du @ self.Lambda_u @ du)

    def cost(self, X: np.ndarray, U: np.ndarray) -> float:
        stage = sum(self.stage_cost(X[j], U[j]) for j in range(self.horizon))
        return stage + self.terminal.cost(X[-1])

    def dynamics_residual(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return np.array(
            [X[j + 1] - self.model.nominal_step(X[j], U[j]) for j in range(self.horizon)]
        )

    def violations(self, x_hat: np.ndarray, X: np.ndarray, U: np.ndarray) -> dict[str, float]:
        """Largest violation of each constraint group (0 when satisfied)."""
        m, N = self.model, self.horizon
        out = {
            "initial_tube": max(self.init_ellipsoid.shifted(X[0]).level(x_hat) - 1.0, 0.0),
            "dynamics": float(np.max(np.abs(self.dynamics_residual(X, U)))),
            "terminal_set": max(self.terminal_set.level(X[N]) - 1.0, 0.0),
        }
        if self.tight.U_tilde is not None:
            slack = np.array([self.tight.U_tilde.slack(U[j]) for j in range(N)])
            out["input"] = max(float(-np.min(slack)), 0.0)
        if self.tight.Y_tilde is not None:
            slack = np.array([self.tight.Y_tilde.slack(m.C @ X[j]) for j in range(N)])
            out["output"] = max(float(-np.min(slack)), 0.0)
        active = list(self.locality.active)
        if active:
            V = X[:N] @ m.A_tilde.T + U @ m.B_tilde.T
            excess = np.abs(V[:, active]) - self.locality.half_widths[active]
            out["locality"] = max(float(np.max(excess)), 0.0)
        return out


def fhocp_spec(
    bundle: DesignBundle, horizon: int, sp: Setpoint | None = None
) -> FhocpSpec:
    if bundle.mode != ControllerMode.TUBE:
        raise ConfigurationError("the FHOCP needs a tube design bundle", cause="bundle_mode")
    tight = bundle.tube_sets()
    if sp is None:
        if bundle.terminal is None:
            raise ConfigurationError("tube bundle has no terminal ingredients", cause="terminal")
        sp = bundle.terminal.setpoint
    terminal = bundle.terminal_for(sp)
    return FhocpSpec(
        model=bundle.model,
        controller=bundle.controller,
        horizon=horizon,
        Lambda_x=terminal.Lambda_x,
        Lambda_u=terminal.Lambda_u,
        terminal=terminal,
        tight=tight,
        setpoint=sp,
        init_ellipsoid=bundle.controller.rpi,
    )


class _Subproblem:
    """Parametrized elastic QP around a guess ``(Xg, Ug)``."""

    def __init__(self, spec: FhocpSpec, opts: NmpcOptions) -> None:
        m, N = spec.model, spec.horizon
        n, nm = m.n, m.m
        sp = spec.setpoint
        margin = opts.margin
        self.spec = spec
        self.opts = opts

        self.xhat = cp.Parameter(n, name="xhat")
        self.Xg = cp.Parameter((N + 1, n), name="Xg")
        self.Ug = cp.Parameter((N, nm), name="Ug")
        self.Ak = [cp.Parameter((n, n), name=f"A{j}") for j in range(N)]
        self.Bk = [cp.Parameter((n, nm), name=f"B{j}") for j in range(N)]
        self.ck = [cp.Parameter(n, name=f"c{j}") for j in range(N)]
        self.radius = cp.Parameter(nonneg=True, name="radius")
        self.cost_weight = cp.Parameter(nonneg=True, name="cost_weight")

        X = cp.Variable((N + 1, n), name="X")
        U = cp.Variable((N, nm), name="U")
        self.X, self.U = X, U
        slacks: list[cp.Variable] = []

        def slack(shape, name: str) -> cp.Variable:
            s = cp.Variable(shape, nonneg=True, name=name)
            slacks.append(s)
            return s

        cons = []
        s_dyn = slack((N, n), "s_dyn")
        for j in range(N):
            lin = self.Ak[j] @ X[j] + self.Bk[j] @ U[j] + self.ck[j]
            cons += [X[j + 1] - lin <= s_dyn[j], lin - X[j + 1] <= s_dyn[j]]

        F_init = spec.init_ellipsoid.factor
        s_init = slack(1, "s_init")
        cons.append(cp.norm(F_init.T @ (self.xhat - X[0])) <= 1.0 - margin + s_init[0])

        F_term = spec.terminal_set.factor
        s_term = slack(1, "s_term")
        cons.append(cp.norm(F_term.T @ (X[N] - sp.x_bar)) <= 1.0 - margin + s_term[0])

        if spec.tight.U_tilde is not None:
            Pu = spec.tight.U_tilde
            s_u = slack((N, Pu.n_rows), "s_u")
            cons.append(U @ Pu.G.T <= np.tile(Pu.b - margin, (N, 1)) + s_u)
        if spec.tight.Y_tilde is not None:
            Py = spec.tight.Y_tilde
            s_y = slack((N, Py.n_rows), "s_y")
            cons.append(X[:N] @ (Py.G @ m.C).T <= np.tile(Py.b - margin, (N, 1)) + s_y)
        active = list(spec.locality.active)
        if active:
            widths = spec.locality.half_widths[active]
            V = X[:N] @ m.A_tilde[active].T + U @ m.B_tilde[active].T
            s_v = slack((N, len(active)), "s_v")
            cons.append(cp.abs(V) <= np.tile(widths - margin, (N, 1)) + s_v)

        cons += [cp.abs(X - self.Xg) <= self.radius, cp.abs(U - self.Ug) <= self.radius]

        J = sum(
            cp.quad_form(X[j] - sp.x_bar, spec.Lambda_x) + cp.quad_form(U[j] - sp.u_bar, spec.Lambda_u)
            for j in range(N)
        )
        J = J + cp.quad_form(X[N] - sp.x_bar, spec.terminal.P_f)
        penalty = sum(cp.sum(s) for s in slacks)
        self.problem = cp.Problem(
            cp.Minimize(self.cost_weight * J + opts.penalty * penalty), cons
        )
        self.solver = sdp.select_solver()

    def solve(
        self,
        x_hat: np.ndarray,
        X: np.ndarray,
        U: np.ndarray,
        radius: float,
        cost_weight: float,
    ) -> tuple[np.ndarray, np.ndarray] | None:
        m = self.spec.model
        self.xhat.value = x_hat
        self.Xg.value = X
        self.Ug.value = U
        self.radius.value = radius
        self.cost_weight.value = cost_weight
        for j in range(self.spec.horizon):
            A_j, B_j = m.nominal_jacobians(X[j], U[j])
            self.Ak[j].value = A_j
            self.Bk[j].value = B_j
            self.ck[j].value = m.nominal_step(X[j], U[j]) - A_j @ X[j] - B_j @ U[j]
        try:
            self.problem.solve(solver=self.solver)
        except cp.error.SolverError as exc:
            logger.debug(f"FHOCP subproblem: solver error {exc}")
            return None
        if self.problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            logger.debug(f"FHOCP subproblem: status {self.problem.status}")
            return None
        return np.asarray(self.X.value), np.asarray(self.U.value)


@dataclass
class FhocpSolution:
    x_tilde_seq: np.ndarray
    u_tilde_seq: np.ndarray
    cost: float
    status: FhocpStatus
    kkt_residual: float
    max_violation: float
    iterations: int = 0
    violations: dict[str, float] = field(default_factory=dict)

    def feasible(self, tol: float) -> bool:
        return self.max_violation <= tol


class FhocpInstance:
    """An FHOCP at a particular estimate ``x̂``; the subproblem is shared across instances."""

    def __init__(self, spec: FhocpSpec, x_hat: np.ndarray, options: NmpcOptions | None = None,
                 subproblem: _Subproblem | None = None) -> None:
        x_hat = np.asarray(x_hat, dtype=float).reshape(-1)
        if x_hat.shape[0] != spec.model.n or not np.all(np.isfinite(x_hat)):
            raise ConfigurationError("x_hat must be a finite state vector", cause="x_hat")
        self.spec = spec
        self.x_hat = x_hat
        self.options = options or NmpcOptions()
        self._subproblem = subproblem

    @property
    def subproblem(self) -> _Subproblem:
        if self._subproblem is None:
            self._subproblem = _Subproblem(self.spec, self.options)
        return self._subproblem

    def violations(self, X: np.ndarray, U: np.ndarray) -> dict[str, float]:
        return self.spec.violations(self.x_hat, X, U)

    def max_violation(self, X: np.ndarray, U: np.ndarray) -> float:
        return max(self.violations(X, U).values())

    def merit(self, X: np.ndarray, U: np.ndarray, cost_weight: float) -> float:
        """Exact ℓ1 penalty merit (dynamics counted elementwise)."""
        v = self.violations(X, U)
        dyn = float(np.sum(np.abs(self.spec.dynamics_residual(X, U))))
        rest = sum(val for key, val in v.items() if key != "dynamics")
        return cost_weight * self.spec.cost(X, U) + self.options.penalty * (dyn + rest)

    def equilibrium_guess(self) -> tuple[np.ndarray, np.ndarray]:
        sp, N = self.spec.setpoint, self.spec.horizon
        return np.tile(sp.x_bar, (N + 1, 1)), np.tile(sp.u_bar, (N, 1))

    def rollout(self, x0: np.ndarray, inputs: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Nominal rollout from ``x0``, driven by ``inputs`` or by the auxiliary law."""
        m, N = self.spec.model, self.spec.horizon
        X = np.zeros((N + 1, m.n))
        U = np.zeros((N, m.m))
        X[0] = x0
        for j in range(N):
            U[j] = self.spec.auxiliary_input(X[j]) if inputs is None else inputs[j]
            X[j + 1] = m.nominal_step(X[j], U[j])
        return X, U

    def cold_starts(self) -> list[tuple[np.ndarray, np.ndarray]]:
        sp, N = self.spec.setpoint, self.spec.horizon
        return [
            self.rollout(self.x_hat),
            self.rollout(self.x_hat, np.tile(sp.u_bar, (N, 1))),
            self.equilibrium_guess(),
        ]


def build_fhocp(
    bundle: DesignBundle,
    horizon: int,
    x_hat,
    sp: Setpoint | None = None,
    options: NmpcOptions | None = None,
) -> FhocpInstance:
    return FhocpInstance(fhocp_spec(bundle, horizon, sp), x_hat, options)


@dataclass
class _SqpResult:
    X: np.ndarray
    U: np.ndarray
    converged: bool
    step: float
    iterations: int
    best: tuple[np.ndarray, np.ndarray, float] | None


def _sqp(
    inst: FhocpInstance, X: np.ndarray, U: np.ndarray, cost_weight: float
) -> _SqpResult:
    opts = inst.options
    radius = opts.trust_radius
    merit = inst.merit(X, U, cost_weight)
    best: tuple[np.ndarray, np.ndarray, float] | None = None
    step = np.inf
    converged = False
    it = 0

    def remember(Xc: np.ndarray, Uc: np.ndarray) -> None:
        nonlocal best
        if inst.max_violation(Xc, Uc) <= opts.feas_tol:
            cost = inst.spec.cost(Xc, Uc)
            if best is None or cost < best[2]:
                best = (Xc.copy(), Uc.copy(), cost)

    remember(X, U)
    for it in range(1, opts.max_iter + 1):
        qp = inst.subproblem.solve(inst.x_hat, X, U, radius, cost_weight)
        if qp is None:
            radius *= 0.25
            if radius < 1e-10:
                break
            continue
        dX, dU = qp[0] - X, qp[1] - U
        step = float(max(np.max(np.abs(dX)), np.max(np.abs(dU)) if dU.size else 0.0))
        if step <= opts.kkt_tol:
            # a short step only certifies stationarity when the trust region did not clip it
            if step < 0.5 * radius:
                converged = True
                break
            if radius < opts.trust_radius:
                radius = opts.trust_radius
                continue
        alpha = 1.0
        accepted = False
        while alpha >= 1e-4:
            Xn, Un = X + alpha * dX, U + alpha * dU
            mn = inst.merit(Xn, Un, cost_weight)
            if mn < merit:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            radius = 0.25 * min(radius, step)
            if radius < 1e-10:
                break
            continue
        X, U, merit = Xn, Un, mn
        remember(X, U)
        radius = min(2.0 * radius, opts.trust_radius) if alpha == 1.0 else max(alpha * radius, 1e-8)
    return _SqpResult(X, U, converged, step, it, best)


def _solution(
    inst: FhocpInstance, X: np.ndarray, U: np.ndarray, status: FhocpStatus, step: float, it: int
) -> FhocpSolution:
    viol = inst.violations(X, U)
    return FhocpSolution(
        x_tilde_seq=X,
        u_tilde_seq=U,
        cost=inst.spec.cost(X, U),
        status=status,
        kkt_residual=step,
        max_violation=max(viol.values()),
        iterations=it,
        violations=viol,
    )


def solve_fhocp(
    inst: FhocpInstance, warm_start: tuple[np.ndarray, np.ndarray] | None = None
) -> FhocpSolution:
    """SQP on the FHOCP; ``infeasible`` is only reported after a feasibility restoration phase."""
    opts = inst.options
    if warm_start is not None:
        X0, U0 = (np.array(a, dtype=float) for a in warm_start)
    else:
        X0, U0 = min(inst.cold_starts(), key=lambda g: inst.merit(g[0], g[1], 1.0))
    res = _sqp(inst, X0, U0, 1.0)
    if res.converged and inst.max_violation(res.X, res.U) <= opts.feas_tol:
        return _solution(inst, res.X, res.U, FhocpStatus.OPTIMAL, res.step, res.iterations)
    if res.best is not None:
        logger.debug(f"FHOCP: no convergence in {res.iterations} iterations, keeping best feasible iterate")
        return _solution(inst, res.best[0], res.best[1], FhocpStatus.MAX_ITER, res.step, res.iterations)

    # feasibility restoration: drive the slacks to zero with the cost switched off
    starts = [(res.X, res.U)] + inst.cold_starts()
    least = min(starts, key=lambda g: inst.max_violation(*g))
    for Xs, Us in starts:
        restored = _sqp(inst, Xs, Us, 0.0)
        if inst.max_violation(restored.X, restored.U) < inst.max_violation(*least):
            least = (restored.X, restored.U)
        if restored.best is None:
            continue
        res = _sqp(inst, restored.best[0], restored.best[1], 1.0)
        if res.converged and inst.max_violation(res.X, res.U) <= opts.feas_tol:
            return _solution(inst, res.X, res.U, FhocpStatus.OPTIMAL, res.step, res.iterations)
        X, U, _ = res.best if res.best is not None else restored.best
        return _solution(inst, X, U, FhocpStatus.MAX_ITER, res.step, res.iterations)
    return _solution(inst, least[0], least[1], FhocpStatus.INFEASIBLE, res.step, res.iterations)


@dataclass
class NmpcMemory:
    k: int = 0
    previous: FhocpSolution | None = None
    setpoint: Setpoint | None = None
    candidate_feasible: bool | None = None


@dataclass
class RhStep:
    u: np.ndarray
    solution: FhocpSolution
    candidate_feasible: bool | None


class TubeNmpc:
    """Receding-horizon tube controller ``u = ũ(k) + K (x̂ − x̃(k))``."""

    def __init__(self, bundle: DesignBundle, horizon: int, options: NmpcOptions | None = None) -> None:
        self.bundle = bundle
        self.horizon = horizon
        self.options = options or NmpcOptions()
        self.memory = NmpcMemory()
        self._hint: tuple[np.ndarray, np.ndarray] | None = None
        self._subproblems: dict[tuple[float, ...], tuple[FhocpSpec, _Subproblem]] = {}

    def _spec_for(self, sp: Setpoint) -> tuple[FhocpSpec, _Subproblem]:
        key = tuple(np.round(sp.y_bar, 12).tolist())
        if key not in self._subproblems:
            spec = fhocp_spec(self.bundle, self.horizon, sp)
            self._subproblems[key] = (spec, _Subproblem(spec, self.options))
        return self._subproblems[key]

    def set_setpoint(self, sp: Setpoint) -> None:
        """Start a new reference segment (the next step is a fresh k=0)."""
        self.memory = NmpcMemory(setpoint=sp)

    def plan_hint(self, X: np.ndarray, U: np.ndarray) -> None:
        """Initial guess for the next step that has no previous solution to shift."""
        self._hint = (np.array(X, dtype=float), np.array(U, dtype=float))

    def instance(self, x_hat) -> FhocpInstance:
        if self.memory.setpoint is None:
            raise ConfigurationError("no setpoint selected", cause="setpoint")
        spec, qp = self._spec_for(self.memory.setpoint)
        return FhocpInstance(spec, x_hat, self.options, qp)

    def shifted_candidate(self, inst: FhocpInstance) -> tuple[np.ndarray, np.ndarray] | None:
        prev = self.memory.previous
        if prev is None:
            return None
        X, U = prev.x_tilde_seq, prev.u_tilde_seq
        u_aux = inst.spec.auxiliary_input(X[-1])
        x_next = inst.spec.model.nominal_step(X[-1], u_aux)
        return np.vstack([X[1:], x_next]), np.vstack([U[1:], u_aux])

    def rh_step(self, x_hat) -> RhStep:
        mem = self.memory
        inst = self.instance(x_hat)
        opts = self.options
        candidate = self.shifted_candidate(inst)
        candidate_feasible: bool | None = None
        if candidate is not None and opts.verify_candidate:
            viol = inst.max_violation(*candidate)
            candidate_feasible = viol <= opts.warn_tol
            if not candidate_feasible:
                logger.warning(
                    f"step {mem.k}: shifted candidate violates the constraints by {viol:.3e}"
                )
        warm = candidate if candidate is not None else self._hint
        self._hint = None
        sol = solve_fhocp(inst, warm_start=warm)
        if not sol.feasible(opts.warn_tol):
            if mem.k == 0 or mem.previous is None:
                raise FhocpInfeasibleError(
                    f"FHOCP infeasible at the first step of the segment (violation {sol.max_violation:.3e})",
                    cause="fhocp_initial",
                    details={"violations": sol.violations},
                )
            if candidate_feasible:
                raise FhocpSolverError(
                    f"FHOCP solve failed at step {mem.k} although the shifted candidate is feasible",
                    cause="fhocp_solver",
                    details={"step": mem.k, "violations": sol.violations},
                )
            raise FhocpInfeasibleError(
                f"FHOCP infeasible at step {mem.k}", cause="fhocp_infeasible",
                details={"step": mem.k, "violations": sol.violations},
            )
        if sol.max_violation > opts.feas_tol:
            logger.warning(
                f"step {mem.k}: FHOCP solution violates the constraints by {sol.max_violation:.3e}"
            )
        x_hat = inst.x_hat
        u = sol.u_tilde_seq[0] + self.bundle.controller.K @ (x_hat - sol.x_tilde_seq[0])
        self.memory = NmpcMemory(
            k=mem.k + 1, previous=sol, setpoint=mem.setpoint, candidate_feasible=candidate_feasible
        )
        return RhStep(u=u, solution=sol, candidate_feasible=candidate_feasible)


def initially_feasible(
    bundle: DesignBundle, horizon: int, x_hat, sp: Setpoint, options: NmpcOptions | None = None
) -> bool:
    """Whether the FHOCP at ``x̂`` admits a solution (tolerance ``feas_tol``)."""
    inst = build_fhocp(bundle, horizon, x_hat, sp, options)
    return solve_fhocp(inst).feasible(inst.options.feas_tol)

