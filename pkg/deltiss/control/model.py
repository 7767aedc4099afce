"""RNN plant model, activation oracles and the incremental sector machinery."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import bisect, root

from deltiss.control.errors import ModelError, SetpointInfeasibleError
from deltiss.control.geometry import Box, Ellipsoid

logger = logging.getLogger(__name__)

ScalarFn = Callable[[np.ndarray], np.ndarray]


def _tanh_deriv(v):
    t = np.tanh(v)
    return 1.0 - t * t


def _tanh_deriv2(v):
    t = np.tanh(v)
    return -2.0 * t * (1.0 - t * t)


@dataclass(frozen=True)
class SigmoidSpec:
    """Activation oracle: value, first and second derivative (all vectorized)."""

    kind: str
    fn: ScalarFn
    deriv: ScalarFn
    deriv2: ScalarFn

    def __reduce__(self):
        if self.kind in BUILTIN_SIGMOIDS:
            return (sigmoid_from_kind, (self.kind,))
        return super().__reduce__()

    def check_assumptions(self, grid: np.ndarray | None = None) -> None:
        """Spot-check the sigmoid properties on a grid (not a proof)."""
        v = np.linspace(-10.0, 10.0, 4001) if grid is None else np.asarray(grid, dtype=float)
        sigma = self.fn(v)
        slope = self.deriv(v)
        if abs(float(self.fn(np.array(0.0)))) > 1e-12:
            raise ModelError(f"activation {self.kind}: sigma(0) != 0", cause="activation")
        if abs(float(self.deriv(np.array(0.0))) - 1.0) > 1e-9:
            raise ModelError(f"activation {self.kind}: sigma'(0) != 1", cause="activation")
        if np.any(np.abs(sigma) > 1.0 + 1e-12):
            raise ModelError(f"activation {self.kind}: |sigma| exceeds 1", cause="activation")
        if np.any(slope <= 0.0):
            raise ModelError(f"activation {self.kind}: sigma' not positive", cause="activation")
        pos = v[v >= 0.0]
        slopes = self.deriv(np.sort(pos))
        if np.any(np.diff(slopes) > 1e-12):
            raise ModelError(
                f"activation {self.kind}: sigma' increases away from 0", cause="activation"
            )
        if np.max(np.abs(self.deriv(pos) - self.deriv(-pos))) > 1e-12:
            raise ModelError(f"activation {self.kind}: sigma' not even", cause="activation")


TANH = SigmoidSpec("tanh", np.tanh, _tanh_deriv, _tanh_deriv2)
BUILTIN_SIGMOIDS: dict[str, SigmoidSpec] = {"tanh": TANH}


def sigmoid_from_kind(kind: str) -> SigmoidSpec:
    try:
        return BUILTIN_SIGMOIDS[kind]
    except KeyError:
        raise ModelError(f"unknown activation '{kind}'", cause="activation") from None


def sector_bound(act: SigmoidSpec, h: float) -> float:
    """Largest v̄ with ``1 - σ'(v) ≤ 1/h`` on ``|v| ≤ v̄``; ``inf`` for ``h = 1``."""
    if not h >= 1.0:
        raise ModelError(f"sector slope must satisfy h >= 1, got {h}", cause="sector")
    if h == 1.0:
        return math.inf
    target = 1.0 - 1.0 / h

    def gap(v: float) -> float:
        return float(act.deriv(np.array(v))) - target

    hi = 1.0
    while gap(hi) > 0.0:
        hi *= 2.0
        if hi > 1e6:
            raise ModelError(f"sector bound search diverged for h={h}", cause="sector")
    return float(bisect(gap, 0.0, hi, xtol=1e-13, maxiter=200))


@dataclass(frozen=True, eq=False)
class SectorParams:
    """Diagonal sector slopes ``h`` with the matching half widths ``v̄_i(h_i)``."""

    h: np.ndarray
    v_bars: np.ndarray

    @classmethod
    def from_slopes(cls, h: Sequence[float], activations: Sequence[SigmoidSpec]) -> "SectorParams":
        h_arr = np.array(h, dtype=float).reshape(-1)
        if h_arr.shape[0] != len(activations):
            raise ModelError("one sector slope per activation channel is required", cause="sector")
        v_bars = np.array([sector_bound(act, hi) for act, hi in zip(activations, h_arr)])
        h_arr.setflags(write=False)
        v_bars.setflags(write=False)
        return cls(h_arr, v_bars)

    @classmethod
    def identity(cls, activations: Sequence[SigmoidSpec]) -> "SectorParams":
        return cls.from_slopes(np.ones(len(activations)), activations)

    @property
    def H(self) -> np.ndarray:
        return np.diag(self.h)

    @property
    def active(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(np.isfinite(self.v_bars)))

    def box(self) -> Box:
        return Box(self.v_bars)

    def incremented(self, eps_h: float, activations: Sequence[SigmoidSpec]) -> "SectorParams":
        return SectorParams.from_slopes(self.h + eps_h, activations)


@dataclass(frozen=True, eq=False)
class Setpoint:
    y_bar: np.ndarray
    x_bar: np.ndarray
    u_bar: np.ndarray

    def v_eq(self, model: "RnnModel") -> np.ndarray:
        return model.A_tilde @ self.x_bar + model.B_tilde @ self.u_bar


def _matrix(value, name: str) -> np.ndarray:
    try:
        arr = np.array(np.atleast_2d(np.asarray(value, dtype=float)), copy=True)
    except (TypeError, ValueError) as exc:
        raise ModelError(f"{name} is not a numeric matrix", cause=name) from exc
    if arr.ndim != 2:
        raise ModelError(f"{name} must be two-dimensional", cause=name)
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name} has non-finite entries", cause=name)
    arr.setflags(write=False)
    return arr


def _finite(value, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name} has non-finite entries", cause=name)
    return arr


@dataclass(frozen=True, eq=False)
class RnnModel:
    """x⁺ = A_x x + B_u u + D_w w + B_σ σ(Ã x + B̃ u + D̃ w),  y = C x + η."""

    A_x: np.ndarray
    B_u: np.ndarray
    D_w: np.ndarray
    B_sigma: np.ndarray
    A_tilde: np.ndarray
    B_tilde: np.ndarray
    D_tilde: np.ndarray
    C: np.ndarray
    activations: tuple[SigmoidSpec, ...] = field(default=())

    def __post_init__(self) -> None:
        for name in ("A_x", "B_u", "D_w", "B_sigma", "A_tilde", "B_tilde", "D_tilde", "C"):
            object.__setattr__(self, name, _matrix(getattr(self, name), name))
        n = self.A_x.shape[0]
        m = self.B_u.shape[1]
        d = self.D_w.shape[1]
        nu = self.B_sigma.shape[1]
        expected = {
            "A_x": (n, n),
            "B_u": (n, m),
            "D_w": (n, d),
            "B_sigma": (n, nu),
            "A_tilde": (nu, n),
            "B_tilde": (nu, m),
            "D_tilde": (nu, d),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ModelError(f"{name} has shape {actual}, expected {shape}", cause=name)
        if self.C.shape[1] != n:
            raise ModelError(f"C has {self.C.shape[1]} columns, expected {n}", cause="C")
        acts = tuple(self.activations) or tuple(TANH for _ in range(nu))
        if len(acts) != nu:
            raise ModelError(
                f"{len(acts)} activations given for {nu} channels", cause="activation"
            )
        object.__setattr__(self, "activations", acts)

    @property
    def n(self) -> int:
        return self.A_x.shape[0]

    @property
    def m(self) -> int:
        return self.B_u.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def d(self) -> int:
        return self.D_w.shape[1]

    @property
    def nu(self) -> int:
        return self.B_sigma.shape[1]

    @cached_property
    def A(self) -> np.ndarray:
        return self.A_x + self.B_sigma @ self.A_tilde

    @cached_property
    def B(self) -> np.ndarray:
        return self.B_u + self.B_sigma @ self.B_tilde

    @cached_property
    def D(self) -> np.ndarray:
        return self.D_w + self.B_sigma @ self.D_tilde

    @cached_property
    def B_q(self) -> np.ndarray:
        return -self.B_sigma

    @cached_property
    def _all_tanh(self) -> bool:
        return all(act.kind == "tanh" for act in self.activations)

    def sigma(self, v: np.ndarray) -> np.ndarray:
        if self._all_tanh:
            return np.tanh(v)
        return np.array([act.fn(vi) for act, vi in zip(self.activations, v)], dtype=float)

    def sigma_prime(self, v: np.ndarray) -> np.ndarray:
        if self._all_tanh:
            return _tanh_deriv(v)
        return np.array([act.deriv(vi) for act, vi in zip(self.activations, v)], dtype=float)

    def q(self, v: np.ndarray) -> np.ndarray:
        return v - self.sigma(v)

    def q_prime(self, v: np.ndarray) -> np.ndarray:
        return 1.0 - self.sigma_prime(v)

    def check_activations(self) -> None:
        for act in {a.kind: a for a in self.activations}.values():
            act.check_assumptions()

    def plant_step(self, x, u, w) -> tuple[np.ndarray, np.ndarray]:
        """Successor in the reformulated form, plus the activation input v."""
        x = _finite(x, "x")
        u = _finite(u, "u")
        w = _finite(w, "w")
        v = self.A_tilde @ x + self.B_tilde @ u + self.D_tilde @ w
        x_next = self.A @ x + self.B @ u + self.D @ w + self.B_q @ self.q(v)
        return x_next, v

    def plant_step_original(self, x, u, w) -> np.ndarray:
        x = _finite(x, "x")
        u = _finite(u, "u")
        w = _finite(w, "w")
        v = self.A_tilde @ x + self.B_tilde @ u + self.D_tilde @ w
        return self.A_x @ x + self.B_u @ u + self.D_w @ w + self.B_sigma @ self.sigma(v)

    def output(self, x, eta=None) -> np.ndarray:
        y = self.C @ _finite(x, "x")
        return y if eta is None else y + _finite(eta, "eta")

    def observer_step(self, L, L_tilde, x_hat, u, y) -> np.ndarray:
        x_hat = _finite(x_hat, "x_hat")
        u = _finite(u, "u")
        innovation = _finite(y, "y") - self.C @ x_hat
        v_hat = self.A_tilde @ x_hat + self.B_tilde @ u + L_tilde @ innovation
        return self.A @ x_hat + self.B @ u + L @ innovation + self.B_q @ self.q(v_hat)

    def nominal_step(self, x_tilde, u_tilde) -> np.ndarray:
        v = self.A_tilde @ x_tilde + self.B_tilde @ u_tilde
        return self.A @ x_tilde + self.B @ u_tilde + self.B_q @ self.q(v)

    def nominal_jacobians(self, x_tilde, u_tilde) -> tuple[np.ndarray, np.ndarray]:
        v = self.A_tilde @ x_tilde + self.B_tilde @ u_tilde
        Bq_dq = self.B_q * self.q_prime(v)[None, :]
        return self.A + Bq_dq @ self.A_tilde, self.B + Bq_dq @ self.B_tilde


def equilibrium(m: RnnModel, y_bar, max_iter: int = 200, tol: float = 1e-9) -> Setpoint:
    """Steady state ``(x̄, ū)`` producing output ``ȳ``."""
    y_bar = np.atleast_1d(np.asarray(y_bar, dtype=float))
    if m.p != m.m:
        raise SetpointInfeasibleError(
            f"setpoint problem needs p == m, got p={m.p}, m={m.m}", cause="non_square"
        )
    if y_bar.shape[0] != m.p:
        raise SetpointInfeasibleError(f"setpoint has dimension {y_bar.shape[0]}, expected {m.p}")
    n = m.n
    eye = np.eye(n)

    def residual(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x, u = z[:n], z[n:]
        v = m.A_tilde @ x + m.B_tilde @ u
        r = np.concatenate([x - m.nominal_step(x, u), m.C @ x - y_bar])
        Bq_dq = m.B_q * m.q_prime(v)[None, :]
        J = np.block(
            [
                [eye - m.A - Bq_dq @ m.A_tilde, -m.B - Bq_dq @ m.B_tilde],
                [m.C, np.zeros((m.p, m.m))],
            ]
        )
        return r, J

    sol = root(residual, np.zeros(n + m.m), jac=True, method="hybr", options={"maxfev": max_iter})
    z = sol.x
    r, J = residual(z)
    # Newton polish down to the residual tolerance
    for _ in range(5):
        if not np.all(np.isfinite(r)) or np.linalg.norm(r) <= 1e-13:
            break
        try:
            z = z - np.linalg.solve(J, r)
        except np.linalg.LinAlgError:
            break
        r, J = residual(z)
    if not np.all(np.isfinite(z)) or not np.linalg.norm(r) <= tol:
        raise SetpointInfeasibleError(
            f"no equilibrium found for y_bar={y_bar.tolist()} (residual {np.linalg.norm(r):.3e})",
            cause="equilibrium",
            details={"y_bar": y_bar.tolist(), "residual": float(np.linalg.norm(r))},
        )
    x_bar, u_bar = z[:n].copy(), z[n:].copy()
    logger.debug(f"Equilibrium for y_bar={y_bar.tolist()}: u_bar={u_bar.tolist()}")
    return Setpoint(y_bar=y_bar, x_bar=x_bar, u_bar=u_bar)


@dataclass(frozen=True, eq=False)
class DisturbanceBounds:
    """Process disturbance ``w ∈ E(Q_w0)`` and measurement noise ``η ∈ E(Q_eta0)``."""

    Q_w0: np.ndarray
    Q_eta0: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "Q_w0", _matrix(self.Q_w0, "Q_w0"))
        object.__setattr__(self, "Q_eta0", _matrix(self.Q_eta0, "Q_eta0"))

    @cached_property
    def w_set(self) -> Ellipsoid:
        return Ellipsoid(self.Q_w0)

    @cached_property
    def eta_set(self) -> Ellipsoid:
        return Ellipsoid(self.Q_eta0)

    def check_dims(self, m: RnnModel) -> None:
        if self.Q_w0.shape != (m.d, m.d):
            raise ModelError(f"Q_w0 has shape {self.Q_w0.shape}, expected {(m.d, m.d)}", cause="Q_w0")
        if self.Q_eta0.shape != (m.p, m.p):
            raise ModelError(
                f"Q_eta0 has shape {self.Q_eta0.shape}, expected {(m.p, m.p)}", cause="Q_eta0"
            )
        # building the sets validates positive definiteness
        _ = (self.w_set, self.eta_set)

    def scaled(self, factor: float) -> "DisturbanceBounds":
        """Bounds whose radii are multiplied by ``factor``."""
        return DisturbanceBounds(self.Q_w0 / factor**2, self.Q_eta0 / factor**2)
