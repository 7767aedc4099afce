"""Closed-loop simulation, Monte-Carlo verification suites and the region-of-attraction sweep."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla

from deltiss.control.control_models import (
    NmpcOptions,
    RoaGridSpec,
    SuiteResult,
    VerificationReport,
)
from deltiss.control.errors import ConfigurationError, DeltissError, SetpointInfeasibleError
from deltiss.control.geometry import (
    Polytope,
    sample_in,
    sample_on_boundary,
    sample_product,
    support,
)
from deltiss.control.model import DisturbanceBounds, RnnModel, SectorParams, Setpoint, equilibrium
from deltiss.control.nmpc import TubeNmpc, solve_fhocp
from deltiss.control.synthesis import (
    ControllerMode,
    DesignBundle,
    ObserverDesign,
    static_setpoint_admissible,
)

logger = logging.getLogger(__name__)

MEMBERSHIP_TOL = 1e-8
CONSTRAINT_TOL = 1e-6
WARN_TOL = 1e-4


class DisturbancePolicy:
    """Emits ``(w(k), η(k))`` inside ``E(Q_w0) × E(Q_eta0)``.

    ``worst-case`` aligns the disturbances with the directions that expand the observer
    error the most in the ``P_o`` metric and alternates their sign at random.
    """

    MODES = ("zero", "uniform", "boundary", "worst-case")

    def __init__(
        self,
        mode: str,
        bounds: DisturbanceBounds,
        seed: int = 0,
        model: RnnModel | None = None,
        observer: ObserverDesign | None = None,
    ) -> None:
        if mode not in self.MODES:
            raise ConfigurationError(f"unknown disturbance policy '{mode}'", cause="policy")
        self.mode = mode
        self.bounds = bounds
        self.rng = np.random.default_rng(seed)
        self._directions: tuple[np.ndarray, np.ndarray] | None = None
        if mode == "worst-case":
            if model is None or observer is None:
                raise ConfigurationError(
                    "worst-case disturbances need the model and the observer", cause="policy"
                )
            self._directions = (
                _expanding_direction(model.D.T @ observer.P_o @ model.D, bounds.Q_w0),
                _expanding_direction(observer.L.T @ observer.P_o @ observer.L, bounds.Q_eta0),
            )

    def sample(self) -> tuple[np.ndarray, np.ndarray]:
        E_w, E_eta = self.bounds.w_set, self.bounds.eta_set
        if self.mode == "zero":
            return np.zeros(E_w.dim), np.zeros(E_eta.dim)
        if self.mode == "uniform":
            return sample_in(E_w, self.rng), sample_in(E_eta, self.rng)
        if self.mode == "boundary":
            return sample_on_boundary(E_w, self.rng), sample_on_boundary(E_eta, self.rng)
        assert self._directions is not None
        signs = self.rng.choice([-1.0, 1.0], size=2)
        return signs[0] * self._directions[0], signs[1] * self._directions[1]


def _expanding_direction(gain: np.ndarray, shape: np.ndarray) -> np.ndarray:
    """Maximizer of ``vᵀ gain v`` on the boundary of ``E(shape)``."""
    _, vecs = sla.eigh(gain, shape)
    # eigh normalizes vᵀ shape v = 1
    return vecs[:, -1]


@dataclass
class Trajectory:
    """Row ``k`` holds the signals at time ``k`` (before the update)."""

    x: np.ndarray
    x_hat: np.ndarray
    u: np.ndarray
    y: np.ndarray
    w: np.ndarray
    eta: np.ndarray
    y_bar: np.ndarray
    tube_member: np.ndarray
    locality_member: np.ndarray
    constraint_violation: np.ndarray
    x_tilde: np.ndarray | None = None
    u_tilde: np.ndarray | None = None
    fhocp_status: list[str] = field(default_factory=list)
    cost: np.ndarray | None = None
    candidate_feasible: list[bool | None] = field(default_factory=list)

    def __post_init__(self) -> None:
        T = self.x.shape[0]
        for name in ("x_hat", "u", "y", "w", "eta", "y_bar", "tube_member", "locality_member",
                     "constraint_violation"):
            if getattr(self, name).shape[0] != T:
                raise ValueError(f"trajectory field {name} has inconsistent length")

    @property
    def steps(self) -> int:
        return self.x.shape[0]

    @property
    def has_nominal(self) -> bool:
        return self.x_tilde is not None

    def columns(self) -> list[str]:
        def named(prefix: str, width: int) -> list[str]:
            return [f"{prefix}[{i}]" for i in range(width)]

        cols = ["k"] + named("x", self.x.shape[1]) + named("xhat", self.x_hat.shape[1])
        if self.x_tilde is not None:
            cols += named("xtilde", self.x_tilde.shape[1])
        cols += named("u", self.u.shape[1])
        if self.u_tilde is not None:
            cols += named("utilde", self.u_tilde.shape[1])
        cols += named("y", self.y.shape[1]) + named("ybar", self.y_bar.shape[1])
        cols += named("w", self.w.shape[1]) + named("eta", self.eta.shape[1])
        cols += ["tube_member", "locality_member", "constraint_violation"]
        if self.has_nominal:
            cols += ["fhocp_status", "cost", "candidate_feasible"]
        return cols

    def rows(self) -> Iterable[list]:
        for k in range(self.steps):
            row: list = [k, *self.x[k], *self.x_hat[k]]
            if self.x_tilde is not None:
                row += list(self.x_tilde[k])
            row += list(self.u[k])
            if self.u_tilde is not None:
                row += list(self.u_tilde[k])
            row += [*self.y[k], *self.y_bar[k], *self.w[k], *self.eta[k]]
            row += [int(self.tube_member[k]), int(self.locality_member[k]), self.constraint_violation[k]]
            if self.has_nominal:
                assert self.cost is not None
                cand = self.candidate_feasible[k]
                row += [self.fhocp_status[k], self.cost[k], "" if cand is None else int(cand)]
            yield [repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns())
            writer.writerows(self.rows())
        return path


def _polytope_violation(P: Polytope | None, v: np.ndarray) -> float:
    if P is None:
        return 0.0
    return max(float(-np.min(P.slack(v))), 0.0)


def _segments(reference: Sequence[tuple[int, np.ndarray]], steps: int) -> list[np.ndarray]:
    """ȳ(k) for every step."""
    out = []
    idx = 0
    for k in range(steps):
        while idx + 1 < len(reference) and reference[idx + 1][0] <= k:
            idx += 1
        out.append(np.asarray(reference[idx][1], dtype=float))
    return out


def run_closed_loop(
    bundle: DesignBundle,
    controller: str,
    reference: Sequence[tuple[int, np.ndarray]],
    policy: DisturbancePolicy,
    steps: int,
    horizon: int = 10,
    options: NmpcOptions | None = None,
    x0: np.ndarray | None = None,
    x_hat0: np.ndarray | None = None,
    nmpc: TubeNmpc | None = None,
) -> Trajectory:
    """Plant, observer and controller stepped together for ``steps`` steps.

    ``reference`` is a list of ``(start step, ȳ)`` segments starting at 0.
    """
    m, obs, ctrl = bundle.model, bundle.observer, bundle.controller
    if controller not in ("static", "nmpc"):
        raise ConfigurationError(f"unknown controller '{controller}'", cause="controller")
    if controller == "nmpc" and bundle.mode != ControllerMode.TUBE:
        raise ConfigurationError("nmpc needs a tube design bundle", cause="bundle_mode")
    if controller == "static" and bundle.mode != ControllerMode.STATIC:
        raise ConfigurationError("the static law needs a static design bundle", cause="bundle_mode")
    if not reference or reference[0][0] != 0:
        raise ConfigurationError("the reference schedule must start at step 0", cause="schedule")

    y_bars = _segments(reference, steps)
    setpoints: dict[tuple[float, ...], Setpoint] = {}

    def setpoint_of(y_bar: np.ndarray) -> Setpoint:
        key = tuple(y_bar.tolist())
        if key not in setpoints:
            try:
                setpoints[key] = equilibrium(m, y_bar)
            except SetpointInfeasibleError as exc:
                raise ConfigurationError(exc.message, cause=exc.cause, details=exc.details) from exc
            if controller == "static":
                ok, cause = static_setpoint_admissible(
                    m, bundle.bounds, obs, ctrl, setpoints[key],
                    *((bundle.U, bundle.Y) if bundle.options.constrain_rpi else (None, None)),
                )
                if not ok:
                    raise ConfigurationError(
                        f"static law is not certified at y_bar={y_bar.tolist()}", cause=cause
                    )
        return setpoints[key]

    sp0 = setpoint_of(y_bars[0])
    x = sp0.x_bar.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    x_hat = x.copy() if x_hat0 is None else np.asarray(x_hat0, dtype=float).copy()
    if not obs.rpi.contains(x - x_hat, MEMBERSHIP_TOL):
        raise ConfigurationError(
            "initial estimation error lies outside the observer RPI set", cause="initial_error"
        )
    if controller == "static" and not ctrl.rpi.shifted(sp0.x_bar).contains(x_hat, MEMBERSHIP_TOL):
        raise ConfigurationError(
            "initial estimate lies outside the controller RPI set around the setpoint",
            cause="initial_estimate",
        )

    n, nm, p = m.n, m.m, m.p
    X, Xh, Uu = np.zeros((steps, n)), np.zeros((steps, n)), np.zeros((steps, nm))
    Y, W, Eta = np.zeros((steps, p)), np.zeros((steps, m.d)), np.zeros((steps, p))
    Yb = np.array(y_bars)
    tube = np.zeros(steps, dtype=bool)
    local = np.zeros(steps, dtype=bool)
    viol = np.zeros(steps)
    nominal = controller == "nmpc"
    Xt = np.zeros((steps, n)) if nominal else None
    Ut = np.zeros((steps, nm)) if nominal else None
    cost = np.zeros(steps) if nominal else None
    statuses: list[str] = []
    candidates: list[bool | None] = []
    box = obs.sector.box().intersect(ctrl.sector.box())
    E_c = ctrl.rpi
    if nominal:
        nmpc = nmpc or TubeNmpc(bundle, horizon, options)

    current: tuple[float, ...] | None = None
    for k in range(steps):
        sp = setpoint_of(y_bars[k])
        key = tuple(sp.y_bar.tolist())
        w, eta = policy.sample()
        if nominal:
            assert nmpc is not None and Xt is not None and Ut is not None and cost is not None
            if key != current:
                nmpc.set_setpoint(sp)
            step = nmpc.rh_step(x_hat)
            u = step.u
            Xt[k] = step.solution.x_tilde_seq[0]
            Ut[k] = step.solution.u_tilde_seq[0]
            cost[k] = step.solution.cost
            statuses.append(step.solution.status.value)
            candidates.append(step.candidate_feasible)
            tube[k] = E_c.contains(x_hat - Xt[k], MEMBERSHIP_TOL)
        else:
            u = sp.u_bar + ctrl.K @ (x_hat - sp.x_bar)
            tube[k] = E_c.shifted(sp.x_bar).contains(x_hat, MEMBERSHIP_TOL)
        current = key

        y = m.output(x, eta)
        x_next, v = m.plant_step(x, u, w)
        local[k] = box.contains(v)
        viol[k] = max(_polytope_violation(bundle.U, u), _polytope_violation(bundle.Y, m.C @ x))
        if viol[k] > CONSTRAINT_TOL:
            log = logger.warning if viol[k] <= WARN_TOL else logger.error
            log(f"step {k}: constraint violated by {viol[k]:.3e}")
        X[k], Xh[k], Uu[k], Y[k], W[k], Eta[k] = x, x_hat, u, y, w, eta
        x_hat = m.observer_step(obs.L, obs.L_tilde, x_hat, u, y)
        x = x_next

    return Trajectory(
        x=X, x_hat=Xh, u=Uu, y=Y, w=W, eta=Eta, y_bar=Yb, tube_member=tube,
        locality_member=local, constraint_violation=viol, x_tilde=Xt, u_tilde=Ut,
        fhocp_status=statuses, cost=cost, candidate_feasible=candidates,
    )


def boundedness_radius(traj: Trajectory, x_bar: np.ndarray, tail: int = 250) -> float:
    """``max ‖x(k) − x̄‖`` over the last ``tail`` steps."""
    window = traj.x[-min(tail, traj.steps):]
    return float(np.max(np.linalg.norm(window - x_bar, axis=1)))


def output_tube_halfwidths(bundle: DesignBundle) -> np.ndarray:
    """Per-output half widths of ``C (E_c ⊕ E_o)``."""
    C = bundle.model.C
    return np.array(
        [
            support(bundle.controller.rpi, C[i : i + 1], np.ones(1))
            + support(bundle.observer.rpi, C[i : i + 1], np.ones(1))
            for i in range(C.shape[0])
        ]
    )


def output_tube_fraction(bundle: DesignBundle, traj: Trajectory, tail: int = 250) -> float:
    """Share of the tail window whose noise-free output is in ``ȳ ⊕ C (E_c ⊕ E_o)``."""
    widths = output_tube_halfwidths(bundle)
    start = max(traj.steps - tail, 0)
    clean = traj.x[start:] @ bundle.model.C.T
    inside = np.all(np.abs(clean - traj.y_bar[start:]) <= widths * (1.0 + MEMBERSHIP_TOL), axis=1)
    return float(np.mean(inside))


# -- verification suites -------------------------------------------------------------------


class _Suite:
    def __init__(self, name: str, samples: int) -> None:
        self.name = name
        self.samples = samples
        self.evaluated = 0
        self.violations = 0
        self.worst = np.inf

    def add(self, margin: float, tol: float) -> None:
        self.evaluated += 1
        self.worst = min(self.worst, margin)
        if margin < -tol:
            self.violations += 1

    def add_many(self, margins: np.ndarray, tol: float) -> None:
        if margins.size == 0:
            return
        self.evaluated += int(margins.size)
        self.worst = min(self.worst, float(np.min(margins)))
        self.violations += int(np.sum(margins < -tol))

    def result(self) -> SuiteResult:
        return SuiteResult(
            name=self.name,
            samples=self.samples,
            evaluated=self.evaluated,
            violations=self.violations,
            worst_margin=float(self.worst) if self.evaluated else 0.0,
        )


def _in_box(sector: SectorParams, v: np.ndarray) -> bool:
    active = list(sector.active)
    if not active:
        return True
    return bool(np.all(np.abs(v[active]) <= sector.v_bars[active]))


def _reference_setpoint(bundle: DesignBundle) -> Setpoint:
    if bundle.mode == ControllerMode.STATIC:
        assert bundle.controller.setpoint is not None
        return bundle.controller.setpoint
    if bundle.terminal is None:
        raise ConfigurationError("tube bundle has no terminal ingredients", cause="terminal")
    return bundle.terminal.setpoint


def verify_design(
    bundle: DesignBundle, n_samples: int = 10_000, seed: int = 0, tol: float = MEMBERSHIP_TOL
) -> VerificationReport:
    """Sampling oracles for every invariance and dissipation claim of the bundle."""
    m, bounds, obs, ctrl = bundle.model, bundle.bounds, bundle.observer, bundle.controller
    rng = np.random.default_rng(seed)
    sp = _reference_setpoint(bundle)
    E_o, E_c, E_w, E_eta = obs.rpi, ctrl.rpi, bounds.w_set, bounds.eta_set
    P_o, P_c = obs.P_o, ctrl.P_c
    Q_ox, Q_ow = obs.Q_ox, obs.Q_owo
    Q_cx = P_c @ ctrl.Q_cx_tilde @ P_c
    Q_cw = ctrl.Q_cwc
    tube = ctrl.mode == ControllerMode.TUBE
    terminal = bundle.terminal

    suites = {
        name: _Suite(name, n_samples)
        for name in (
            "observer_rpi",
            "observer_dissipation",
            "controller_rpi",
            "controller_dissipation",
            "sector_condition",
        )
    }
    deltas, errors, ws, etas = sample_product([E_c, E_o, E_w, E_eta], rng, n_samples)
    offsets = (
        sample_product([terminal.terminal_set.shifted(np.zeros(m.n))], rng, n_samples)[0]
        if tube and terminal is not None
        else np.zeros((n_samples, m.n))
    )

    for s in range(n_samples):
        delta, e, w, eta = deltas[s], errors[s], ws[s], etas[s]
        # nominal reference point: the setpoint, or a nominal state inside the terminal set
        x_ref = sp.x_bar + offsets[s]
        u_ref = sp.u_bar + ctrl.K @ offsets[s] if tube else sp.u_bar
        x_hat = x_ref + delta
        x = x_hat + e
        u = u_ref + ctrl.K @ delta
        y = m.output(x, eta)
        v = m.A_tilde @ x + m.B_tilde @ u + m.D_tilde @ w
        innovation = y - m.C @ x_hat
        v_hat = m.A_tilde @ x_hat + m.B_tilde @ u + obs.L_tilde @ innovation
        v_ref = m.A_tilde @ x_ref + m.B_tilde @ u_ref
        x_next, _ = m.plant_step(x, u, w)
        x_hat_next = m.observer_step(obs.L, obs.L_tilde, x_hat, u, y)
        x_ref_next = m.nominal_step(x_ref, u_ref) if tube else sp.x_bar

        if _in_box(obs.sector, v) and _in_box(obs.sector, v_hat):
            e_next = x_next - x_hat_next
            suites["observer_rpi"].add(1.0 - E_o.level(e_next), tol)
            xi = np.concatenate([w, eta])
            lhs = e @ (P_o - Q_ox) @ e + xi @ Q_ow @ xi
            rhs = e_next @ P_o @ e_next
            suites["observer_dissipation"].add((lhs - rhs) / max(1.0, abs(lhs)), tol)

        if (
            _in_box(ctrl.sector, v_hat)
            and _in_box(ctrl.sector, v_ref)
            and _in_box(obs.sector, v)
            and _in_box(obs.sector, v_hat)
        ):
            d_next = x_hat_next - x_ref_next
            suites["controller_rpi"].add(1.0 - E_c.level(d_next), tol)
            wc = np.concatenate([eta, e])
            lhs = delta @ (P_c - Q_cx) @ delta + wc @ Q_cw @ wc
            rhs = d_next @ P_c @ d_next
            suites["controller_dissipation"].add((lhs - rhs) / max(1.0, abs(lhs)), tol)

    sectors = [obs.sector, ctrl.sector] + ([terminal.sector] if terminal is not None else [])
    per_sector = max(n_samples // len(sectors), 1)
    for sector in sectors:
        for i in range(m.nu):
            vb = sector.v_bars[i] if np.isfinite(sector.v_bars[i]) else 10.0
            v1 = rng.uniform(-vb, vb, per_sector)
            v2 = rng.uniform(-vb, vb, per_sector)
            act = m.activations[i]
            dq = (v1 - act.fn(v1)) - (v2 - act.fn(v2))
            dv = v1 - v2
            suites["sector_condition"].add_many(dq * (dv - sector.h[i] * dq), 1e-12)

    results = [s.result() for s in suites.values()]
    if tube and terminal is not None:
        results.append(_terminal_suite(bundle, rng, n_samples, tol))
    return VerificationReport(suites=results, tolerance=tol)


def _terminal_suite(
    bundle: DesignBundle, rng: np.random.Generator, n_samples: int, tol: float
) -> SuiteResult:
    assert bundle.terminal is not None
    m, K, term = bundle.model, bundle.controller.K, bundle.terminal
    sp = term.setpoint
    X_f = term.terminal_set
    suite = _Suite("terminal_invariance", n_samples)
    points = sample_product([X_f], rng, n_samples)[0]
    for x in points:
        u = sp.u_bar + K @ (x - sp.x_bar)
        x_next = m.nominal_step(x, u)
        dx, du = x - sp.x_bar, u - sp.u_bar
        stage = dx @ term.Lambda_x @ dx + du @ term.Lambda_u @ du
        decrease = term.cost(x) - term.cost(x_next) - stage
        suite.add(min(1.0 - X_f.level(x_next), decrease / max(1.0, term.cost(x))), tol)
    return suite.result()


# -- region of attraction ------------------------------------------------------------------


@dataclass
class RoaMap:
    """Feasibility per (ȳ₀, ȳ) cell and controller variant."""

    y0_values: np.ndarray
    y_values: np.ndarray
    variants: list[str]
    feasible: dict[str, np.ndarray]

    def cells(self) -> Iterable[tuple[float, float, str, bool]]:
        for i, y0 in enumerate(self.y0_values):
            for j, y in enumerate(self.y_values):
                for variant in self.variants:
                    yield float(y0), float(y), variant, bool(self.feasible[variant][i, j])

    def counts(self) -> dict[str, int]:
        return {v: int(np.sum(self.feasible[v])) for v in self.variants}

    def counterexamples(self) -> list[tuple[float, float, str, str]]:
        """Cells feasible for a variant but not for the next, larger one."""
        out = []
        for smaller, larger in zip(self.variants, self.variants[1:]):
            bad = self.feasible[smaller] & ~self.feasible[larger]
            for i, j in zip(*np.nonzero(bad)):
                out.append((float(self.y0_values[i]), float(self.y_values[j]), smaller, larger))
        return out

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["ybar0", "ybar", "variant", "feasible"])
            for y0, y, variant, ok in self.cells():
                writer.writerow([repr(y0), repr(y), variant, int(ok)])
        return path

    def to_markdown(self) -> str:
        counts = self.counts()
        total = len(self.y0_values) * len(self.y_values)
        lines = ["| variant | feasible cells | share |", "|---|---|---|"]
        for v in self.variants:
            lines.append(f"| {v} | {counts[v]} / {total} | {counts[v] / total:.6f} |")
        return "\n".join(lines) + "\n"


@dataclass
class _SweepContext:
    static: DesignBundle
    tube: DesignBundle | None
    horizons: list[int]
    y_values: np.ndarray
    steps: int
    policy_mode: str
    seed: int
    options: NmpcOptions


def _static_cell(ctx: _SweepContext, sp0: Setpoint, sp: Setpoint) -> bool:
    b = ctx.static
    U, Y = (b.U, b.Y) if b.options.constrain_rpi else (None, None)
    ok, _ = static_setpoint_admissible(b.model, b.bounds, b.observer, b.controller, sp, U, Y)
    return ok and b.controller.rpi.shifted(sp.x_bar).contains(sp0.x_bar, MEMBERSHIP_TOL)


def _nmpc_cells(ctx: _SweepContext, sp0: Setpoint, sp: Setpoint, cell_seed: int) -> list[bool]:
    bundle = ctx.tube
    assert bundle is not None
    try:
        bundle.terminal_for(sp)
    except DeltissError as exc:
        logger.debug(f"ROA cell y_bar={sp.y_bar.tolist()}: no terminal ingredients ({exc.cause})")
        return [False] * len(ctx.horizons)
    results = []
    shorter: tuple[np.ndarray, np.ndarray] | None = None
    for N in ctx.horizons:
        ctrl = TubeNmpc(bundle, N, ctx.options)
        ctrl.set_setpoint(sp)
        inst = ctrl.instance(sp0.x_bar)
        warm = None
        if shorter is not None:
            # extend the shorter-horizon plan with the terminal law
            X, U = list(shorter[0]), list(shorter[1])
            while len(U) < N:
                u_aux = inst.spec.auxiliary_input(X[-1])
                U.append(u_aux)
                X.append(bundle.model.nominal_step(X[-1], u_aux))
            warm = (np.array(X), np.array(U))
        sol = solve_fhocp(inst, warm_start=warm)
        if not sol.feasible(ctx.options.feas_tol):
            results.append(False)
            continue
        shorter = (sol.x_tilde_seq, sol.u_tilde_seq)
        ctrl.plan_hint(*shorter)
        policy = DisturbancePolicy(
            ctx.policy_mode, bundle.bounds, cell_seed, bundle.model, bundle.observer
        )
        try:
            traj = run_closed_loop(
                bundle, "nmpc", [(0, sp.y_bar)], policy, ctx.steps, N, ctx.options,
                x0=sp0.x_bar, nmpc=ctrl,
            )
        except DeltissError as exc:
            logger.debug(f"ROA cell run failed: {exc.message}")
            results.append(False)
            continue
        results.append(bool(np.all(traj.constraint_violation <= CONSTRAINT_TOL)))
    return results


def _sweep_row(args: tuple[_SweepContext, int, float]) -> tuple[int, dict[str, list[bool]]]:
    ctx, row, y0 = args
    variants = ["static"] + [f"nmpc({N})" for N in ctx.horizons]
    out: dict[str, list[bool]] = {v: [] for v in variants}
    m = ctx.static.model
    try:
        sp0 = equilibrium(m, [y0])
    except SetpointInfeasibleError:
        for v in variants:
            out[v] = [False] * len(ctx.y_values)
        return row, out
    for col, y in enumerate(ctx.y_values):
        try:
            sp = equilibrium(m, [y])
        except SetpointInfeasibleError:
            for v in variants:
                out[v].append(False)
            continue
        out["static"].append(_static_cell(ctx, sp0, sp))
        if ctx.tube is None:
            continue
        nmpc = _nmpc_cells(ctx, sp0, sp, ctx.seed + row * len(ctx.y_values) + col)
        for N, ok in zip(ctx.horizons, nmpc):
            out[f"nmpc({N})"].append(ok)
    return row, out


def _sweep_context(
    static_bundle: DesignBundle,
    tube_bundle: DesignBundle | None,
    grid: RoaGridSpec,
    options: NmpcOptions | None,
    policy_mode: str,
    seed: int,
) -> _SweepContext:
    if static_bundle.model.p != 1:
        raise ConfigurationError("the ROA sweep is defined for scalar outputs", cause="roa_grid")
    return _SweepContext(
        static=static_bundle,
        tube=tube_bundle,
        horizons=list(grid.horizons) if tube_bundle is not None else [],
        y_values=grid.values(),
        steps=grid.steps,
        policy_mode=policy_mode,
        seed=seed,
        options=options or NmpcOptions(),
    )


def roa_variants(grid: RoaGridSpec, with_tube: bool = True) -> list[str]:
    return ["static"] + ([f"nmpc({N})" for N in grid.horizons] if with_tube else [])


def roa_row(
    static_bundle: DesignBundle,
    tube_bundle: DesignBundle | None,
    grid: RoaGridSpec,
    row: int,
    options: NmpcOptions | None = None,
    policy_mode: str = "uniform",
    seed: int = 0,
) -> dict[str, list[bool]]:
    """One row (fixed ȳ₀) of the sweep, keyed by variant."""
    ctx = _sweep_context(static_bundle, tube_bundle, grid, options, policy_mode, seed)
    if not 0 <= row < len(ctx.y_values):
        raise ConfigurationError(f"row {row} is outside the grid", cause="roa_grid")
    _, out = _sweep_row((ctx, row, float(ctx.y_values[row])))
    return out


def roa_map_from_rows(
    grid: RoaGridSpec, variants: list[str], rows: dict[int, dict[str, list[bool]]]
) -> RoaMap:
    values = grid.values()
    feasible = {v: np.zeros((len(values), len(values)), dtype=bool) for v in variants}
    for row, out in rows.items():
        for v in variants:
            feasible[v][row, :] = out[v]
    return RoaMap(y0_values=values, y_values=values, variants=variants, feasible=feasible)


def roa_sweep(
    static_bundle: DesignBundle,
    tube_bundle: DesignBundle | None,
    grid: RoaGridSpec,
    options: NmpcOptions | None = None,
    policy_mode: str = "uniform",
    seed: int = 0,
    jobs: int = 1,
) -> RoaMap:
    """Trackability of ȳ from the steady state of ȳ₀ for the static law and each horizon.

    Rows of the grid are independent; with ``jobs > 1`` they run in worker processes and
    are merged back by row index.
    """
    ctx = _sweep_context(static_bundle, tube_bundle, grid, options, policy_mode, seed)
    tasks = [(ctx, row, float(y0)) for row, y0 in enumerate(ctx.y_values)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_row, tasks))
    else:
        results = [_sweep_row(task) for task in tasks]
    for row, _ in results:
        logger.debug(f"ROA row {row} done")
    roa = roa_map_from_rows(grid, roa_variants(grid, tube_bundle is not None), dict(results))
    logger.info(f"ROA sweep finished: {roa.counts()}")
    return roa
