"""Observer, static/tube controller and terminal-ingredient synthesis.

Every design is produced by an (H, γ) retry loop around an LMI problem and is re-certified
after the gains are substituted back. The LMI blocks are written once (``*_problem``
functions) and reused both for solving and for certification.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Mapping, Sequence, TypeVar

import numpy as np

from deltiss.control import sdp
from deltiss.control.control_models import (
    LoopOptions,
    StageAttempt,
    SynthesisOptions,
    SynthesisTranscript,
)
from deltiss.control.errors import (
    DESIGN_FAILURES,
    BudgetExhaustedError,
    DeltissError,
    DesignCertificationError,
    DetectabilityError,
    EmptyTightenedSetError,
    SetpointRejectedError,
    StabilizabilityError,
    SynthesisError,
    TerminalInfeasibleError,
)
from deltiss.control.geometry import Box, Ellipsoid, Polytope, support, tighten_halfspace
from deltiss.control.model import DisturbanceBounds, RnnModel, SectorParams, Setpoint
from deltiss.control.sdp import LmiProblem, hcat, sym_blocks, vcat

logger = logging.getLogger(__name__)

T = TypeVar("T")
Values = Mapping[str, Any]


class ControllerMode(str, Enum):
    STATIC = "static"
    TUBE = "tube"


@dataclass(frozen=True, eq=False)
class ObserverDesign:
    L: np.ndarray
    L_tilde: np.ndarray
    P_o: np.ndarray
    gamma_o: float
    S_o: np.ndarray
    sector: SectorParams
    Q_ox: np.ndarray
    Q_owo: np.ndarray

    @property
    def N(self) -> np.ndarray:
        return self.P_o @ self.L

    @property
    def N_tilde(self) -> np.ndarray:
        return self.S_o @ self.L_tilde

    @property
    def rpi(self) -> Ellipsoid:
        return Ellipsoid(self.P_o / self.gamma_o)

    def A_L(self, m: RnnModel) -> np.ndarray:
        return m.A - self.L @ m.C


@dataclass(frozen=True, eq=False)
class ControllerDesign:
    K: np.ndarray
    Q_c: np.ndarray
    gamma_c: float
    sector: SectorParams
    U_c: np.ndarray
    Q_cwc: np.ndarray
    Q_cx_tilde: np.ndarray
    mode: ControllerMode
    setpoint: Setpoint | None = None

    @property
    def P_c(self) -> np.ndarray:
        P = np.linalg.inv(self.Q_c)
        return 0.5 * (P + P.T)

    @property
    def Z(self) -> np.ndarray:
        return self.K @ self.Q_c

    @property
    def rpi(self) -> Ellipsoid:
        return Ellipsoid(self.P_c / self.gamma_c)

    def A_K(self, m: RnnModel) -> np.ndarray:
        return m.A + m.B @ self.K

    def A_tilde_K(self, m: RnnModel) -> np.ndarray:
        return m.A_tilde + m.B_tilde @ self.K

    def control(self, x_hat: np.ndarray) -> np.ndarray:
        """Static law ``u = ū + K (x̂ − x̄)``."""
        if self.setpoint is None:
            raise SynthesisError("static law needs a setpoint", cause="setpoint")
        return self.setpoint.u_bar + self.K @ (x_hat - self.setpoint.x_bar)


@dataclass(frozen=True, eq=False)
class TerminalIngredients:
    P_f: np.ndarray
    gamma_f: float
    sector: SectorParams
    S_f: np.ndarray
    setpoint: Setpoint
    Lambda_x: np.ndarray
    Lambda_u: np.ndarray

    @property
    def gamma_tilde(self) -> float:
        return 1.0 / self.gamma_f

    @property
    def terminal_set(self) -> Ellipsoid:
        return Ellipsoid(self.P_f / self.gamma_f, self.setpoint.x_bar)

    def cost(self, x_tilde: np.ndarray) -> float:
        d = x_tilde - self.setpoint.x_bar
        return float(d @ self.P_f @ d)


@dataclass(frozen=True, eq=False)
class TightenedSets:
    U_tilde: Polytope | None
    Y_tilde: Polytope | None
    V_c: Box
    V_o: Box
    v_bar_c: np.ndarray
    v_bar_o: np.ndarray
    v_tilde_o: np.ndarray
    negative_rows: tuple[str, ...] = ()

    @property
    def v_bar_o_star(self) -> np.ndarray:
        return self.V_o.half_widths

    @property
    def locality(self) -> Box:
        return self.V_c.intersect(self.V_o)


# -- pre-checks ---------------------------------------------------------------------------


def _pbh(A: np.ndarray, other: np.ndarray, stack_rows: bool) -> bool:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    other = np.atleast_2d(np.asarray(other, dtype=float))
    n = A.shape[0]
    if A.shape[1] != n:
        raise SynthesisError(f"A must be square, got {A.shape}", cause="shape")
    norm = np.linalg.norm(A, 2)
    tol = 1e-9 * (norm if norm > 0 else 1.0)
    for lam in np.linalg.eigvals(A):
        if abs(lam) < 1.0:
            continue
        shifted = lam * np.eye(n) - A
        M = np.vstack([shifted, other]) if stack_rows else np.hstack([shifted, other])
        rank = int(np.sum(np.linalg.svd(M, compute_uv=False) > tol))
        if rank < n:
            return False
    return True


def check_detectability(A, C) -> bool:
    """PBH test on ``[λI − A; C]`` for every eigenvalue with ``|λ| ≥ 1``."""
    return _pbh(A, C, stack_rows=True)


def check_stabilizability(A, B) -> bool:
    return _pbh(A, B, stack_rows=False)


def parameters_update(
    h: np.ndarray, gamma: float, gamma_max: float, eps_h: float, eps_gamma: float
) -> tuple[np.ndarray, float]:
    if gamma < gamma_max:
        return np.array(h, dtype=float), gamma + eps_gamma
    return np.asarray(h, dtype=float) + eps_h, 1.0


# -- retry loop ----------------------------------------------------------------------------


class Budget:
    """Stage-solve budget shared by all stages of one pipeline."""

    def __init__(self, total: int) -> None:
        self.total = total
        self.used = 0

    @property
    def exhausted(self) -> bool:
        return self.used >= self.total

    def consume(self) -> None:
        self.used += 1


@dataclass
class _AttemptResult:
    design: Any | None
    failed_stage: str | None = None


def _record(
    transcript: SynthesisTranscript,
    stage: str,
    sector: SectorParams,
    gamma: float | None,
    solution: sdp.LmiSolution,
) -> None:
    worst = solution.worst_block
    transcript.record(
        StageAttempt(
            stage=stage,
            h=sector.h.tolist(),
            gamma=gamma,
            status=solution.status.value,
            worst_block=worst[0] if worst else None,
            min_eig=worst[1] if worst else None,
            objective=solution.objective_value,
        )
    )
    logger.debug(
        f"{stage}: h={sector.h.tolist()} gamma={gamma} -> {solution.status.value}"
    )


def _retry(
    stage: str,
    m: RnnModel,
    loop: LoopOptions,
    budget: Budget,
    transcript: SynthesisTranscript,
    attempt: Callable[[SectorParams, float], _AttemptResult],
    with_gamma: bool = True,
) -> Any:
    h = np.ones(m.nu)
    gamma = 1.0
    first_failure: str | None = None
    while True:
        if budget.exhausted:
            transcript.outcomes[stage] = "budget_exhausted"
            logger.error(f"{stage}: retry budget of {budget.total} stage-solves exhausted")
            raise BudgetExhaustedError(
                f"{stage}: budget of {budget.total} stage-solves exhausted",
                cause=first_failure or stage,
                details={"h": h.tolist(), "gamma": gamma if with_gamma else None},
                transcript=[a.model_dump() for a in transcript.attempts],
            )
        sector = SectorParams.from_slopes(h, m.activations)
        result = attempt(sector, gamma)
        if result.design is not None:
            transcript.outcomes[stage] = "certified"
            logger.info(
                f"{stage}: certified with h={h.tolist()}"
                + (f", gamma={gamma:g}" if with_gamma else "")
            )
            return result.design
        first_failure = first_failure or result.failed_stage
        if with_gamma:
            h, gamma = parameters_update(h, gamma, loop.gamma_max, loop.eps_h, loop.eps_gamma)
        else:
            h = h + loop.eps_h


def _solve(problem: LmiProblem, loop: LoopOptions, budget: Budget) -> sdp.LmiSolution:
    budget.consume()
    return sdp.solve(problem, tol_psd=loop.tol_psd, max_iter=loop.max_iter, solver=loop.solver)


def _row(M: np.ndarray, i: int) -> np.ndarray:
    return M[i : i + 1, :]


def _corner(value: float) -> np.ndarray:
    return np.array([[value]])


# -- observer ------------------------------------------------------------------------------


def observer_problem(
    m: RnnModel,
    bounds: DisturbanceBounds,
    sector: SectorParams,
    gamma_o: float,
    S_fixed: np.ndarray | None = None,
    margin: float = 0.0,
    with_objective: bool = True,
) -> LmiProblem:
    """LMI system for the observer.

    With ``S_fixed`` the multiplier is a constant and the innovation locality blocks are
    included (they are linear only then).
    """
    n, nu, d, p = m.n, m.nu, m.d, m.p
    prob = LmiProblem("observer")
    prob.symmetric("P", n)
    prob.symmetric("Qx", n)
    prob.symmetric("Qw", d + p)
    prob.rectangular("N", n, p)
    prob.rectangular("Nt", nu, p)
    if S_fixed is None:
        prob.diagonal("S", nu)
    H2 = 2.0 * sector.H
    A, A_t, C, D, D_t, B_q = m.A, m.A_tilde, m.C, m.D, m.D_tilde, m.B_q
    Qw0, Qeta0 = bounds.Q_w0, bounds.Q_eta0

    def S_of(v: Values) -> Any:
        return v["S"] if S_fixed is None else S_fixed

    def dissipation(v: Values) -> Any:
        P, N, Nt, S = v["P"], v["N"], v["Nt"], S_of(v)
        return sym_blocks(
            [n, nu, d + p, n],
            {
                (0, 0): P - v["Qx"],
                (0, 1): -A_t.T @ S + C.T @ Nt.T,
                (0, 3): A.T @ P - C.T @ N.T,
                (1, 1): S @ H2,
                (1, 2): hcat([-S @ D_t, Nt]),
                (1, 3): B_q.T @ P,
                (2, 2): v["Qw"],
                (2, 3): vcat([D.T @ P, -N.T]),
                (3, 3): P,
            },
        )

    Qo0 = np.block([[Qw0 / 2.0, np.zeros((d, p))], [np.zeros((p, d)), Qeta0 / 2.0]])
    prob.require_psd("observer_dissipation", dissipation, margin)
    prob.require_psd("observer_noise_bound", lambda v: Qo0 - v["Qw"], margin)
    prob.require_psd("observer_rpi", lambda v: v["Qx"] - v["P"] / gamma_o, margin)
    prob.require_psd("observer_P_positive", lambda v: v["P"], margin)
    prob.require_psd("observer_Qw_positive", lambda v: v["Qw"], margin)
    if S_fixed is None:
        prob.require_psd("observer_S_positive", lambda v: v["S"], margin)

    for i in sector.active:
        vb2 = sector.v_bars[i] ** 2

        def state_block(v: Values, i: int = i, vb2: float = vb2) -> Any:
            return sym_blocks(
                [n, d, 1],
                {
                    (0, 0): v["P"] / (2.0 * gamma_o),
                    (1, 1): Qw0 / 2.0,
                    (0, 2): _row(A_t, i).T,
                    (1, 2): _row(D_t, i).T,
                    (2, 2): _corner(vb2),
                },
            )

        prob.require_psd(f"observer_locality_state[{i}]", state_block, margin)

        if S_fixed is not None:
            s_i = float(S_fixed[i, i])

            def innovation_block(v: Values, i: int = i, vb2: float = vb2, s_i: float = s_i) -> Any:
                Nt_i = v["Nt"][i : i + 1, :]
                return sym_blocks(
                    [n, p, 1],
                    {
                        (0, 0): v["P"] / (2.0 * gamma_o),
                        (1, 1): Qeta0 / 2.0,
                        (0, 2): C.T @ Nt_i.T,
                        (1, 2): Nt_i.T,
                        (2, 2): _corner(vb2 * s_i**2),
                    },
                )

            prob.require_psd(f"observer_locality_innovation[{i}]", innovation_block, margin)

    if with_objective:
        prob.scalar("beta")
        prob.require_psd("observer_shape", lambda v: v["P"] - sdp.scalar(v["beta"]) * np.eye(n), 0.0)
        prob.maximize(lambda v: sdp.scalar(v["beta"]))
    return prob


def _observer_values(d: ObserverDesign) -> dict[str, np.ndarray]:
    return {
        "P": d.P_o,
        "Qx": d.Q_ox,
        "Qw": d.Q_owo,
        "N": d.N,
        "Nt": d.N_tilde,
        "S": d.S_o,
    }


def certify_observer(m: RnnModel, bounds: DisturbanceBounds, design: ObserverDesign) -> dict[str, float]:
    prob = observer_problem(
        m, bounds, design.sector, design.gamma_o, S_fixed=design.S_o, with_objective=False
    )
    return sdp.certify(prob, _observer_values(design))


def observer_synthesize(
    m: RnnModel,
    bounds: DisturbanceBounds,
    opts: SynthesisOptions | None = None,
    budget: Budget | None = None,
    transcript: SynthesisTranscript | None = None,
) -> ObserverDesign:
    opts = opts or SynthesisOptions()
    loop = opts.loop
    budget = budget or Budget(loop.budget)
    transcript = transcript if transcript is not None else SynthesisTranscript()
    bounds.check_dims(m)
    if not check_detectability(m.A, m.C):
        transcript.outcomes["observer"] = "undetectable"
        logger.error("observer: (A, C) is not detectable")
        raise DetectabilityError(
            "the pair (A, C) is not detectable; no observer of this class exists",
            cause="detectability",
            transcript=[a.model_dump() for a in transcript.attempts],
        )

    def attempt(sector: SectorParams, gamma: float) -> _AttemptResult:
        stage_a = observer_problem(m, bounds, sector, gamma, margin=loop.margin)
        sol_a = _solve(stage_a, loop, budget)
        _record(transcript, "observer/multiplier", sector, gamma, sol_a)
        if not sol_a.feasible:
            return _AttemptResult(None, "observer/multiplier")
        S = np.diag(np.diag(sol_a.values["S"]))
        stage_b = observer_problem(m, bounds, sector, gamma, S_fixed=S, margin=loop.margin)
        sol_b = _solve(stage_b, loop, budget)
        _record(transcript, "observer/gains", sector, gamma, sol_b)
        if not sol_b.feasible:
            return _AttemptResult(None, "observer/gains")
        v = sol_b.values
        P = v["P"]
        design = ObserverDesign(
            L=np.linalg.solve(P, v["N"]),
            L_tilde=v["Nt"] / np.diag(S)[:, None],
            P_o=P,
            gamma_o=float(gamma),
            S_o=S,
            sector=sector,
            Q_ox=v["Qx"],
            Q_owo=v["Qw"],
        )
        eigs = certify_observer(m, bounds, design)
        if min(eigs.values()) < -loop.tol_psd:
            logger.warning(f"observer: gain back-substitution failed certification: {eigs}")
            return _AttemptResult(None, "observer/certification")
        return _AttemptResult(design)

    return _retry("observer", m, loop, budget, transcript, attempt)


# -- controller ----------------------------------------------------------------------------


@dataclass(frozen=True)
class _ControllerContext:
    """Constant data shared by the controller blocks."""

    m: RnnModel
    bounds: DisturbanceBounds
    obs: ObserverDesign

    @property
    def D_c(self) -> np.ndarray:
        return np.hstack([self.obs.L, self.obs.L @ self.m.C])

    @property
    def D_tilde_c(self) -> np.ndarray:
        return np.hstack([self.obs.L_tilde, self.obs.L_tilde @ self.m.C])

    @property
    def Q0_wc(self) -> np.ndarray:
        p, n = self.m.p, self.m.n
        return np.block(
            [
                [self.bounds.Q_eta0, np.zeros((p, n))],
                [np.zeros((n, p)), self.obs.P_o / self.obs.gamma_o],
            ]
        )


def _v_eq(m: RnnModel, sp: Setpoint | None) -> np.ndarray:
    return np.zeros(m.nu) if sp is None else np.abs(sp.v_eq(m))


def controller_problem(
    ctx: _ControllerContext,
    sector: SectorParams,
    gamma_c: float,
    mode: ControllerMode,
    sp: Setpoint | None = None,
    margin: float = 0.0,
    objective: str | None = None,
    U: Polytope | None = None,
    Y: Polytope | None = None,
) -> LmiProblem:
    """LMI system for the controller in the congruence-transformed variables
    ``Q_c = P_c⁻¹``, ``Z = K Q_c``, ``U_c = S_c⁻¹``.

    For ``mode=STATIC`` the locality bounds are reduced by ``|Ã x̄ + B̃ ū|``; for
    ``mode=TUBE`` they bound the deviation from the nominal trajectory only.
    ``U``/``Y`` add the rows that keep the static RPI set inside the constraints.
    """
    m, obs = ctx.m, ctx.obs
    n, nu, d, p = m.n, m.nu, m.d, m.p
    A, B, A_t, B_t, B_q, C, D_t = m.A, m.B, m.A_tilde, m.B_tilde, m.B_q, m.C, m.D_tilde
    L_t = obs.L_tilde
    D_c, Dt_c, Q0wc = ctx.D_c, ctx.D_tilde_c, ctx.Q0_wc
    Qeta0, Qw0 = ctx.bounds.Q_eta0, ctx.bounds.Q_w0
    Po_g = obs.P_o / obs.gamma_o
    H2 = 2.0 * sector.H
    v_eq = _v_eq(m, sp) if mode == ControllerMode.STATIC else np.zeros(nu)

    prob = LmiProblem(f"controller_{mode.value}")
    prob.symmetric("Qc", n)
    prob.symmetric("Qcx", n)
    prob.symmetric("Qcw", p + n)
    prob.diagonal("U", nu)
    prob.rectangular("Z", m.m, n)

    def dissipation(v: Values) -> Any:
        Qc, Z, Uc = v["Qc"], v["Z"], v["U"]
        return sym_blocks(
            [n, nu, p + n, n],
            {
                (0, 0): Qc - v["Qcx"],
                (0, 1): -Qc @ A_t.T - Z.T @ B_t.T,
                (0, 3): Qc @ A.T + Z.T @ B.T,
                (1, 1): H2 @ Uc,
                (1, 2): -Dt_c,
                (1, 3): Uc @ B_q.T,
                (2, 2): v["Qcw"],
                (2, 3): D_c.T,
                (3, 3): Qc,
            },
        )

    prob.require_psd("controller_dissipation", dissipation, margin)
    prob.require_psd("controller_noise_bound", lambda v: Q0wc / 2.0 - v["Qcw"], margin)
    prob.require_psd("controller_rpi", lambda v: v["Qcx"] - v["Qc"] / gamma_c, margin)
    prob.require_psd("controller_Q_positive", lambda v: v["Qc"], margin)
    prob.require_psd("controller_U_positive", lambda v: v["U"], margin)
    prob.require_psd("controller_Qw_positive", lambda v: v["Qcw"], margin)

    def closed_loop_row(v: Values, i: int) -> Any:
        return v["Qc"] @ _row(A_t, i).T + v["Z"].T @ _row(B_t, i).T

    for i in sector.active:
        r = sector.v_bars[i] - v_eq[i]

        def locality(v: Values, i: int = i, r: float = r) -> Any:
            return sym_blocks(
                [n, p, n, 1],
                {
                    (0, 0): v["Qc"] / (3.0 * gamma_c),
                    (1, 1): Qeta0 / 3.0,
                    (2, 2): Po_g / 3.0,
                    (0, 3): closed_loop_row(v, i),
                    (1, 3): _row(L_t, i).T,
                    (2, 3): (_row(L_t, i) @ C).T,
                    (3, 3): _corner(r**2),
                },
            )

        prob.require_psd(f"controller_locality[{i}]", locality, margin)

    for i in obs.sector.active:
        r = obs.sector.v_bars[i] - v_eq[i]

        def obs_state(v: Values, i: int = i, r: float = r) -> Any:
            return sym_blocks(
                [n, n, d, 1],
                {
                    (0, 0): v["Qc"] / (3.0 * gamma_c),
                    (1, 1): Po_g / 3.0,
                    (2, 2): Qw0 / 3.0,
                    (0, 3): closed_loop_row(v, i),
                    (1, 3): _row(A_t, i).T,
                    (2, 3): _row(D_t, i).T,
                    (3, 3): _corner(r**2),
                },
            )

        def obs_innovation(v: Values, i: int = i, r: float = r) -> Any:
            return sym_blocks(
                [n, n, p, 1],
                {
                    (0, 0): v["Qc"] / (3.0 * gamma_c),
                    (1, 1): Po_g / 3.0,
                    (2, 2): Qeta0 / 3.0,
                    (0, 3): closed_loop_row(v, i),
                    (1, 3): (_row(L_t, i) @ C).T,
                    (2, 3): _row(L_t, i).T,
                    (3, 3): _corner(r**2),
                },
            )

        prob.require_psd(f"controller_observer_locality_state[{i}]", obs_state, margin)
        prob.require_psd(f"controller_observer_locality_innovation[{i}]", obs_innovation, margin)

    if mode == ControllerMode.STATIC and sp is not None:
        if Y is not None:
            for r_idx in range(Y.n_rows):
                g = Y.G[r_idx : r_idx + 1, :]
                c = float(Y.b[r_idx] - Y.G[r_idx] @ (C @ sp.x_bar))

                def output_row(v: Values, g: np.ndarray = g, c: float = c) -> Any:
                    return sym_blocks(
                        [n, n, 1],
                        {
                            (0, 0): v["Qc"] / (2.0 * gamma_c),
                            (1, 1): Po_g / 2.0,
                            (0, 2): v["Qc"] @ C.T @ g.T,
                            (1, 2): C.T @ g.T,
                            (2, 2): _corner(c**2),
                        },
                    )

                prob.require_psd(f"controller_output_row[{r_idx}]", output_row, margin)
        if U is not None:
            for s_idx in range(U.n_rows):
                g = U.G[s_idx : s_idx + 1, :]
                c = float(U.b[s_idx] - U.G[s_idx] @ sp.u_bar)

                def input_row(v: Values, g: np.ndarray = g, c: float = c) -> Any:
                    return sym_blocks(
                        [n, 1],
                        {
                            (0, 0): v["Qc"] / gamma_c,
                            (0, 1): v["Z"].T @ g.T,
                            (1, 1): _corner(c**2),
                        },
                    )

                prob.require_psd(f"controller_input_row[{s_idx}]", input_row, margin)

    if objective == "enlarge":
        prob.scalar("beta")
        prob.require_psd("controller_shape", lambda v: v["Qc"] - sdp.scalar(v["beta"]) * np.eye(n), 0.0)
        prob.maximize(lambda v: sdp.scalar(v["beta"]))
    elif objective == "shrink":
        prob.scalar("beta")
        prob.require_psd("controller_shape", lambda v: sdp.scalar(v["beta"]) * np.eye(n) - v["Qc"], 0.0)
        prob.minimize(lambda v: sdp.scalar(v["beta"]))
    return prob


def _controller_values(ctrl: ControllerDesign) -> dict[str, np.ndarray]:
    return {
        "Qc": ctrl.Q_c,
        "Qcx": ctrl.Q_cx_tilde,
        "Qcw": ctrl.Q_cwc,
        "U": ctrl.U_c,
        "Z": ctrl.Z,
    }


def setpoint_preconditions(
    m: RnnModel, sp: Setpoint, controller_sector: SectorParams | None, observer_sector: SectorParams
) -> None:
    """Scalar conditions ``v̄_i(h_i) ≥ |Ã_i x̄ + B̃_i ū|`` on the active channels."""
    v_eq = _v_eq(m, sp)
    checks = [("setpoint_observer_sector", observer_sector)]
    if controller_sector is not None:
        checks.insert(0, ("setpoint_controller_sector", controller_sector))
    for label, sector in checks:
        for i in sector.active:
            if not sector.v_bars[i] >= v_eq[i]:
                raise SetpointRejectedError(
                    f"setpoint y_bar={sp.y_bar.tolist()} leaves the sector region of channel {i} "
                    f"(|v_eq|={v_eq[i]:.6g} > v_bar={sector.v_bars[i]:.6g})",
                    cause=f"{label}[{i}]",
                    details={"channel": i, "v_eq": float(v_eq[i]), "v_bar": float(sector.v_bars[i])},
                )


def _check_constraint_rows(ctx: _ControllerContext, sp: Setpoint, U: Polytope | None, Y: Polytope | None) -> None:
    checks = []
    if Y is not None:
        checks.append(("output", Y.slack(ctx.m.C @ sp.x_bar)))
    if U is not None:
        checks.append(("input", U.slack(sp.u_bar)))
    for kind, slack in checks:
        bad = np.flatnonzero(slack <= 0.0)
        if bad.size:
            raise SetpointRejectedError(
                f"steady {kind} violates {kind} constraint row {int(bad[0])}",
                cause=f"controller_{kind}_row[{int(bad[0])}]",
                details={"slack": slack.tolist()},
            )


def certify_controller(
    m: RnnModel,
    bounds: DisturbanceBounds,
    obs: ObserverDesign,
    ctrl: ControllerDesign,
    mode: ControllerMode | None = None,
    sp: Setpoint | None = None,
    U: Polytope | None = None,
    Y: Polytope | None = None,
) -> dict[str, float]:
    """Block minimum eigenvalues after substituting ``Z = K Q_c``.

    ``mode``/``sp`` default to the design's own; passing another setpoint re-evaluates the
    setpoint-dependent blocks there.
    """
    mode = mode or ctrl.mode
    sp = sp if sp is not None else ctrl.setpoint
    prob = controller_problem(
        _ControllerContext(m, bounds, obs), ctrl.sector, ctrl.gamma_c, mode, sp=sp, U=U, Y=Y
    )
    return sdp.certify(prob, _controller_values(ctrl))


def _controller_loop(
    stage: str,
    m: RnnModel,
    bounds: DisturbanceBounds,
    obs: ObserverDesign,
    mode: ControllerMode,
    sp: Setpoint | None,
    opts: SynthesisOptions,
    budget: Budget,
    transcript: SynthesisTranscript,
    objective: str | None,
    U: Polytope | None = None,
    Y: Polytope | None = None,
) -> ControllerDesign:
    loop = opts.loop
    ctx = _ControllerContext(m, bounds, obs)
    if not check_stabilizability(m.A, m.B):
        transcript.outcomes[stage] = "unstabilizable"
        logger.error(f"{stage}: (A, B) is not stabilizable")
        raise StabilizabilityError(
            "the pair (A, B) is not stabilizable",
            cause="stabilizability",
            transcript=[a.model_dump() for a in transcript.attempts],
        )

    def attempt(sector: SectorParams, gamma: float) -> _AttemptResult:
        if mode == ControllerMode.STATIC and sp is not None:
            setpoint_preconditions(m, sp, sector, obs.sector)
        prob = controller_problem(
            ctx, sector, gamma, mode, sp=sp, margin=loop.margin, objective=objective, U=U, Y=Y
        )
        sol = _solve(prob, loop, budget)
        _record(transcript, stage, sector, gamma, sol)
        if not sol.feasible:
            return _AttemptResult(None, stage)
        v = sol.values
        Q_c = v["Qc"]
        design = ControllerDesign(
            K=v["Z"] @ np.linalg.inv(Q_c),
            Q_c=Q_c,
            gamma_c=float(gamma),
            sector=sector,
            U_c=np.diag(np.diag(v["U"])),
            Q_cwc=v["Qcw"],
            Q_cx_tilde=v["Qcx"],
            mode=mode,
            setpoint=sp if mode == ControllerMode.STATIC else None,
        )
        eigs = certify_controller(m, bounds, obs, design, U=U, Y=Y)
        if min(eigs.values()) < -loop.tol_psd:
            logger.warning(f"{stage}: gain back-substitution failed certification")
            return _AttemptResult(None, f"{stage}/certification")
        return _AttemptResult(design)

    return _retry(stage, m, loop, budget, transcript, attempt)


def controller_synthesize_static(
    m: RnnModel,
    bounds: DisturbanceBounds,
    obs: ObserverDesign,
    sp: Setpoint,
    opts: SynthesisOptions | None = None,
    U: Polytope | None = None,
    Y: Polytope | None = None,
    budget: Budget | None = None,
    transcript: SynthesisTranscript | None = None,
) -> ControllerDesign:
    opts = opts or SynthesisOptions()
    budget = budget or Budget(opts.loop.budget)
    transcript = transcript if transcript is not None else SynthesisTranscript()
    setpoint_preconditions(m, sp, None, obs.sector)
    if opts.constrain_rpi:
        _check_constraint_rows(_ControllerContext(m, bounds, obs), sp, U, Y)
    else:
        U = Y = None
    objective = "enlarge" if opts.static_objective == "enlarge" else None
    return _controller_loop(
        "controller/static", m, bounds, obs, ControllerMode.STATIC, sp, opts, budget,
        transcript, objective, U=U, Y=Y,
    )


def controller_synthesize_tube(
    m: RnnModel,
    bounds: DisturbanceBounds,
    obs: ObserverDesign,
    opts: SynthesisOptions | None = None,
    budget: Budget | None = None,
    transcript: SynthesisTranscript | None = None,
) -> ControllerDesign:
    opts = opts or SynthesisOptions()
    budget = budget or Budget(opts.loop.budget)
    transcript = transcript if transcript is not None else SynthesisTranscript()
    return _controller_loop(
        "controller/tube", m, bounds, obs, ControllerMode.TUBE, None, opts, budget,
        transcript, "shrink",
    )


def controller_certify_tube(
    m: RnnModel,
    bounds: DisturbanceBounds,
    obs: ObserverDesign,
    ctrl: ControllerDesign,
    tol_psd: float = sdp.TOL_PSD,
) -> ControllerDesign:
    """Reuse an existing gain (typically the static one) as a tube controller."""
    design = replace(ctrl, mode=ControllerMode.TUBE, setpoint=None)
    eigs = certify_controller(m, bounds, obs, design)
    label = min(eigs, key=eigs.__getitem__)
    if eigs[label] < -tol_psd:
        raise SynthesisError(
            f"the supplied gain does not satisfy the tube conditions ({label})",
            cause=label,
            details={"min_eig": eigs[label]},
        )
    return design


def static_setpoint_admissible(
    m: RnnModel,
    bounds: DisturbanceBounds,
    obs: ObserverDesign,
    ctrl: ControllerDesign,
    sp: Setpoint,
    U: Polytope | None = None,
    Y: Polytope | None = None,
    tol_psd: float = sdp.TOL_PSD,
) -> tuple[bool, str | None]:
    """Whether the stored static design also certifies tracking of ``sp``."""
    try:
        setpoint_preconditions(m, sp, ctrl.sector, obs.sector)
        if U is not None or Y is not None:
            _check_constraint_rows(_ControllerContext(m, bounds, obs), sp, U, Y)
    except SetpointRejectedError as exc:
        return False, exc.cause
    eigs = certify_controller(m, bounds, obs, ctrl, mode=ControllerMode.STATIC, sp=sp, U=U, Y=Y)
    label = min(eigs, key=eigs.__getitem__)
    if eigs[label] < -tol_psd:
        return False, label
    return True, None


# -- tightening ----------------------------------------------------------------------------


def build_tightened_sets(
    m: RnnModel,
    bounds: DisturbanceBounds,
    obs: ObserverDesign,
    ctrl: ControllerDesign,
    U: Polytope | None,
    Y: Polytope | None,
) -> TightenedSets:
    E_c = ctrl.rpi
    E_o = obs.rpi
    E_w = bounds.w_set
    E_eta = bounds.eta_set
    K, C = ctrl.K, m.C
    At_K = ctrl.A_tilde_K(m)
    L_t = obs.L_tilde
    negative: list[str] = []

    def tighten(P: Polytope | None, images: Sequence[tuple[np.ndarray, Ellipsoid]], name: str) -> Polytope | None:
        if P is None:
            return None
        offsets = np.array([tighten_halfspace(P.G[r], P.b[r], images) for r in range(P.n_rows)])
        tightened = P.with_offsets(offsets)
        rows = [f"{name}[{r}]" for r in np.flatnonzero(offsets < 0.0)]
        if tightened.is_empty():
            raise EmptyTightenedSetError(
                f"tightened {name} set is empty (rows {rows or 'jointly'})",
                cause=rows[0] if rows else name,
                details={"offsets": offsets.tolist()},
            )
        negative.extend(rows)
        return tightened

    U_t = tighten(U, [(K, E_c)], "input_row")
    Y_t = tighten(Y, [(C, E_c), (C, E_o)], "output_row")

    one = np.ones(1)
    v_c = np.full(m.nu, np.inf)
    for i in ctrl.sector.active:
        v_c[i] = ctrl.sector.v_bars[i] - (
            support(E_c, _row(At_K, i), one)
            + support(E_eta, _row(L_t, i), one)
            + support(E_o, _row(L_t, i) @ C, one)
        )
    v_o = np.full(m.nu, np.inf)
    v_o_tilde = np.full(m.nu, np.inf)
    for i in obs.sector.active:
        common = support(E_c, _row(At_K, i), one)
        v_o[i] = obs.sector.v_bars[i] - (
            support(E_o, _row(m.A_tilde, i), one) + support(E_w, _row(m.D_tilde, i), one) + common
        )
        v_o_tilde[i] = obs.sector.v_bars[i] - (
            support(E_o, _row(L_t, i) @ C, one) + support(E_eta, _row(L_t, i), one) + common
        )
    v_star = np.minimum(v_o, v_o_tilde)
    for label, widths in (("controller_locality", v_c), ("observer_locality", v_star)):
        bad = np.flatnonzero(~(widths > 0.0))
        if bad.size:
            raise EmptyTightenedSetError(
                f"tightened {label} box is empty on channel {int(bad[0])}",
                cause=f"{label}[{int(bad[0])}]",
                details={"half_widths": [float(x) for x in widths]},
            )
    return TightenedSets(
        U_tilde=U_t,
        Y_tilde=Y_t,
        V_c=Box(v_c),
        V_o=Box(v_star),
        v_bar_c=v_c,
        v_bar_o=v_o,
        v_tilde_o=v_o_tilde,
        negative_rows=tuple(negative),
    )


# -- terminal ingredients ------------------------------------------------------------------


def terminal_problem(
    m: RnnModel,
    K: np.ndarray,
    Lambda_x: np.ndarray,
    Lambda_u: np.ndarray,
    tight: TightenedSets,
    sp: Setpoint,
    sector: SectorParams,
    controller_sector: SectorParams,
    observer_sector: SectorParams,
    margin: float = 0.0,
    beta: tuple[float, float] = (1.0, 1.0),
    with_objective: bool = True,
) -> LmiProblem:
    """Terminal decrease and containment blocks in ``(γ̃_f, P_f, S_f)``."""
    n, nu = m.n, m.nu
    A_K = m.A + m.B @ K
    At_K = m.A_tilde + m.B_tilde @ K
    stage = Lambda_x + K.T @ Lambda_u @ K
    H2 = 2.0 * sector.H
    v_eq = _v_eq(m, sp)

    prob = LmiProblem("terminal")
    prob.scalar("gt")
    prob.symmetric("Pf", n)
    prob.diagonal("Sf", nu)

    def decrease(v: Values) -> Any:
        Pf, Sf = v["Pf"], v["Sf"]
        return sym_blocks(
            [n, nu, n],
            {
                (0, 0): Pf - stage,
                (0, 1): -At_K.T @ Sf,
                (0, 2): A_K.T @ Pf,
                (1, 1): Sf @ H2,
                (1, 2): m.B_q.T @ Pf,
                (2, 2): Pf,
            },
        )

    prob.require_psd("terminal_decrease", decrease, margin)
    prob.require_psd("terminal_P_positive", lambda v: v["Pf"], margin)
    prob.require_psd("terminal_S_positive", lambda v: v["Sf"], margin)
    prob.require_psd("terminal_gamma_positive", lambda v: v["gt"], margin)

    rows: list[tuple[str, np.ndarray, float]] = []
    if tight.Y_tilde is not None:
        Yt = tight.Y_tilde
        for r in range(Yt.n_rows):
            g = Yt.G[r : r + 1, :]
            rows.append((f"terminal_output_row[{r}]", g @ m.C, float(Yt.b[r] - Yt.G[r] @ (m.C @ sp.x_bar))))
    if tight.U_tilde is not None:
        Ut = tight.U_tilde
        for s in range(Ut.n_rows):
            g = Ut.G[s : s + 1, :]
            rows.append((f"terminal_input_row[{s}]", g @ K, float(Ut.b[s] - Ut.G[s] @ sp.u_bar)))
    for i in sector.active:
        rows.append((f"terminal_sector[{i}]", _row(At_K, i), float(sector.v_bars[i] - v_eq[i])))
    for i in controller_sector.active:
        rows.append(
            (f"terminal_controller_locality[{i}]", _row(At_K, i), float(tight.v_bar_c[i] - v_eq[i]))
        )
    for i in observer_sector.active:
        rows.append(
            (
                f"terminal_observer_locality[{i}]",
                _row(At_K, i),
                float(tight.v_bar_o_star[i] - v_eq[i]),
            )
        )

    for label, a, c in rows:
        if not c > margin:
            raise TerminalInfeasibleError(
                f"{label}: the setpoint leaves no room inside the constraint (margin {c:.6g})",
                cause=label,
                details={"margin": c},
            )

        def containment(v: Values, a: np.ndarray = a, c: float = c) -> Any:
            return sym_blocks([n, 1], {(0, 0): v["Pf"], (0, 1): a.T, (1, 1): v["gt"] * c**2})

        prob.require_psd(label, containment, margin)

    if with_objective:
        b1, b2 = beta
        prob.minimize(lambda v: b1 * sdp.trace(v["Pf"]) + b2 * sdp.scalar(v["gt"]))
    return prob


def certify_terminal(
    m: RnnModel,
    K: np.ndarray,
    tight: TightenedSets,
    terminal: TerminalIngredients,
    controller_sector: SectorParams,
    observer_sector: SectorParams,
) -> dict[str, float]:
    prob = terminal_problem(
        m, K, terminal.Lambda_x, terminal.Lambda_u, tight, terminal.setpoint, terminal.sector,
        controller_sector, observer_sector, with_objective=False,
    )
    values = {"gt": np.array([[terminal.gamma_tilde]]), "Pf": terminal.P_f, "Sf": terminal.S_f}
    return sdp.certify(prob, values)


def terminal_synthesize(
    m: RnnModel,
    ctrl: ControllerDesign,
    obs: ObserverDesign,
    tight: TightenedSets,
    sp: Setpoint,
    opts: SynthesisOptions | None = None,
    budget: Budget | None = None,
    transcript: SynthesisTranscript | None = None,
) -> TerminalIngredients:
    opts = opts or SynthesisOptions()
    loop = opts.loop
    budget = budget or Budget(loop.budget)
    transcript = transcript if transcript is not None else SynthesisTranscript()
    Lambda_x, Lambda_u = opts.weights(m.n, m.m)
    K = ctrl.K

    def attempt(sector: SectorParams, _gamma: float) -> _AttemptResult:
        prob = terminal_problem(
            m, K, Lambda_x, Lambda_u, tight, sp, sector, ctrl.sector, obs.sector,
            margin=loop.margin, beta=(opts.beta_f1, opts.beta_f2),
        )
        sol = _solve(prob, loop, budget)
        _record(transcript, "terminal", sector, None, sol)
        if not sol.feasible:
            return _AttemptResult(None, "terminal")
        v = sol.values
        terminal = TerminalIngredients(
            P_f=v["Pf"],
            gamma_f=1.0 / float(v["gt"][0, 0]),
            sector=sector,
            S_f=np.diag(np.diag(v["Sf"])),
            setpoint=sp,
            Lambda_x=Lambda_x,
            Lambda_u=Lambda_u,
        )
        eigs = certify_terminal(m, K, tight, terminal, ctrl.sector, obs.sector)
        if min(eigs.values()) < -loop.tol_psd:
            return _AttemptResult(None, "terminal/certification")
        return _AttemptResult(terminal)

    try:
        return _retry("terminal", m, loop, budget, transcript, attempt, with_gamma=False)
    except TerminalInfeasibleError as exc:
        transcript.outcomes["terminal"] = "infeasible"
        exc.transcript = [a.model_dump() for a in transcript.attempts]
        logger.error(f"terminal: {exc.message}")
        raise


# -- pipelines -----------------------------------------------------------------------------


@dataclass(eq=False)
class DesignBundle:
    """Everything a controller needs at run time, plus the transcript that produced it."""

    model: RnnModel
    bounds: DisturbanceBounds
    observer: ObserverDesign
    controller: ControllerDesign
    options: SynthesisOptions = field(default_factory=SynthesisOptions)
    U: Polytope | None = None
    Y: Polytope | None = None
    tightened: TightenedSets | None = None
    terminal: TerminalIngredients | None = None
    transcript: SynthesisTranscript = field(default_factory=SynthesisTranscript)
    _terminal_cache: dict[tuple[float, ...], TerminalIngredients] = field(
        default_factory=dict, repr=False
    )

    @property
    def mode(self) -> ControllerMode:
        return self.controller.mode

    def tube_sets(self) -> TightenedSets:
        if self.tightened is None:
            self.tightened = build_tightened_sets(
                self.model, self.bounds, self.observer, self.controller, self.U, self.Y
            )
        return self.tightened

    def terminal_for(self, sp: Setpoint) -> TerminalIngredients:
        """Terminal ingredients at ``sp`` (synthesized on first use, then cached)."""
        key = tuple(np.round(sp.y_bar, 12).tolist())
        if self.terminal is not None and np.allclose(self.terminal.setpoint.y_bar, sp.y_bar, atol=1e-12):
            return self.terminal
        if key not in self._terminal_cache:
            self._terminal_cache[key] = terminal_synthesize(
                self.model, self.controller, self.observer, self.tube_sets(), sp,
                self.options, transcript=self.transcript,
            )
        return self._terminal_cache[key]

    def certify(self) -> dict[str, float]:
        """Block minimum eigenvalues of every stored design."""
        eigs = {
            f"observer:{k}": v for k, v in certify_observer(self.model, self.bounds, self.observer).items()
        }
        U, Y = (self.U, self.Y) if self.options.constrain_rpi else (None, None)
        ctrl_eigs = certify_controller(
            self.model, self.bounds, self.observer, self.controller,
            U=U if self.mode == ControllerMode.STATIC else None,
            Y=Y if self.mode == ControllerMode.STATIC else None,
        )
        eigs.update({f"controller:{k}": v for k, v in ctrl_eigs.items()})
        if self.terminal is not None:
            term = certify_terminal(
                self.model, self.controller.K, self.tube_sets(), self.terminal,
                self.controller.sector, self.observer.sector,
            )
            eigs.update({f"terminal:{k}": v for k, v in term.items()})
        return eigs

    def require_certified(self, tol_psd: float = sdp.TOL_PSD) -> None:
        eigs = self.certify()
        label = min(eigs, key=eigs.__getitem__)
        if eigs[label] < -tol_psd:
            raise DesignCertificationError(
                f"design bundle fails certification at {label} (min eig {eigs[label]:.3e})",
                cause=label,
                details={"min_eig": eigs[label]},
            )


def _pipeline_checks(m: RnnModel, transcript: SynthesisTranscript) -> None:
    if not check_detectability(m.A, m.C):
        transcript.outcomes["checks"] = "undetectable"
        raise DetectabilityError("the pair (A, C) is not detectable", cause="detectability")
    if not check_stabilizability(m.A, m.B):
        transcript.outcomes["checks"] = "unstabilizable"
        raise StabilizabilityError("the pair (A, B) is not stabilizable", cause="stabilizability")
    transcript.outcomes["checks"] = "passed"


def _with_transcript(exc: DeltissError, transcript: SynthesisTranscript) -> DeltissError:
    exc.transcript = [a.model_dump() for a in transcript.attempts]
    return exc


def design_static_pipeline(
    m: RnnModel,
    bounds: DisturbanceBounds,
    sp: Setpoint,
    opts: SynthesisOptions | None = None,
    U: Polytope | None = None,
    Y: Polytope | None = None,
) -> DesignBundle:
    opts = opts or SynthesisOptions()
    transcript = SynthesisTranscript()
    budget = Budget(opts.loop.budget)
    try:
        _pipeline_checks(m, transcript)
        obs = observer_synthesize(m, bounds, opts, budget, transcript)
        ctrl = controller_synthesize_static(m, bounds, obs, sp, opts, U, Y, budget, transcript)
    except DESIGN_FAILURES as exc:
        raise _with_transcript(exc, transcript)
    logger.info(f"Static pipeline finished after {budget.used} stage-solves")
    return DesignBundle(m, bounds, obs, ctrl, opts, U=U, Y=Y, transcript=transcript)


def design_tube_pipeline(
    m: RnnModel,
    bounds: DisturbanceBounds,
    sp: Setpoint,
    opts: SynthesisOptions | None = None,
    U: Polytope | None = None,
    Y: Polytope | None = None,
    controller: ControllerDesign | None = None,
    observer: ObserverDesign | None = None,
) -> DesignBundle:
    """Observer, tube controller, tightened sets and terminal ingredients at ``sp``.

    ``observer``/``controller`` reuse existing designs (the controller is re-certified
    against the tube conditions), which is how NMPC variants share the static gain.
    """
    opts = opts or SynthesisOptions()
    transcript = SynthesisTranscript()
    budget = Budget(opts.loop.budget)
    try:
        _pipeline_checks(m, transcript)
        obs = observer or observer_synthesize(m, bounds, opts, budget, transcript)
        if controller is None:
            ctrl = controller_synthesize_tube(m, bounds, obs, opts, budget, transcript)
        else:
            ctrl = controller_certify_tube(m, bounds, obs, controller, opts.loop.tol_psd)
        tight = build_tightened_sets(m, bounds, obs, ctrl, U, Y)
        terminal = terminal_synthesize(m, ctrl, obs, tight, sp, opts, budget, transcript)
    except DESIGN_FAILURES as exc:
        raise _with_transcript(exc, transcript)
    logger.info(f"Tube pipeline finished after {budget.used} stage-solves")
    return DesignBundle(
        m, bounds, obs, ctrl, opts, U=U, Y=Y, tightened=tight, terminal=terminal,
        transcript=transcript,
    )
