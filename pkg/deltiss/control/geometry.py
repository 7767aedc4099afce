"""Ellipsoids, polytopes and boxes.

Ellipsoids are kept by their shape matrix ``Q`` (``E(Q) = {v : vᵀ Q v ≤ 1}``, optionally
shifted by a center). Minkowski differences are never formed explicitly: polytope rows are
tightened one by one with closed-form support functions. ``support`` includes the
center term, so shifted sets are handled; the error tubes passed to ``tighten_halfspace`` are
centered at the origin and contribute only their norm term.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from deltiss.control.errors import GeometryError

SYMMETRY_RTOL = 1e-10


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.ndim != 2:
        raise GeometryError(f"{name} must be a matrix", cause=name)
    return arr


def _as_vector(value, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise GeometryError(f"{name} must be a vector", cause=name)
    return arr


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    """The set ``{v : (v - c)ᵀ Q (v - c) ≤ 1}``."""

    shape: np.ndarray
    center: np.ndarray | None = None

    def __post_init__(self) -> None:
        Q = _as_matrix(self.shape, "shape")
        if Q.shape[0] != Q.shape[1]:
            raise GeometryError(f"ellipsoid shape must be square, got {Q.shape}", cause="shape")
        if not np.all(np.isfinite(Q)):
            raise GeometryError("ellipsoid shape has non-finite entries", cause="shape")
        scale = max(np.max(np.abs(Q)), 1.0)
        if np.max(np.abs(Q - Q.T)) > SYMMETRY_RTOL * scale:
            raise GeometryError("ellipsoid shape is not symmetric", cause="shape")
        Q = 0.5 * (Q + Q.T)
        if np.min(np.linalg.eigvalsh(Q)) <= 0.0:
            raise GeometryError("ellipsoid shape is not positive definite", cause="shape")
        c = np.zeros(Q.shape[0]) if self.center is None else _as_vector(self.center, "center")
        if c.shape[0] != Q.shape[0]:
            raise GeometryError(
                f"center has dimension {c.shape[0]}, shape has {Q.shape[0]}", cause="center"
            )
        object.__setattr__(self, "shape", _readonly(Q))
        object.__setattr__(self, "center", _readonly(c))

    @property
    def dim(self) -> int:
        return self.shape.shape[0]

    @cached_property
    def factor(self) -> np.ndarray:
        """Lower Cholesky factor ``F`` with ``Q = F Fᵀ``."""
        return np.linalg.cholesky(self.shape)

    @cached_property
    def inverse_shape(self) -> np.ndarray:
        Q_inv = sla.cho_solve((self.factor, True), np.eye(self.dim))
        return 0.5 * (Q_inv + Q_inv.T)

    def level(self, v) -> float:
        d = _as_vector(v, "v") - self.center
        if d.shape[0] != self.dim:
            raise GeometryError(f"point has dimension {d.shape[0]}, expected {self.dim}")
        return float(d @ self.shape @ d)

    def contains(self, v, tol: float = 0.0) -> bool:
        return self.level(v) <= 1.0 + tol

    def levels(self, points: np.ndarray) -> np.ndarray:
        """Vectorized ``level`` over the rows of ``points``."""
        d = np.atleast_2d(points) - self.center
        return np.einsum("ij,jk,ik->i", d, self.shape, d)

    def shifted(self, center) -> "Ellipsoid":
        return Ellipsoid(self.shape, center)

    def scaled(self, factor: float) -> "Ellipsoid":
        """Shape multiplied by ``factor`` (``factor > 1`` shrinks the set)."""
        return Ellipsoid(self.shape * factor, self.center)

    def __repr__(self) -> str:
        return f"Ellipsoid(dim={self.dim}, center={self.center.tolist()})"


def support(E: Ellipsoid, M, a) -> float:
    """max over v ∈ E of aᵀ M v."""
    M = _as_matrix(M, "map")
    a = _as_vector(a, "dir")
    if M.shape[1] != E.dim or M.shape[0] != a.shape[0]:
        raise GeometryError(
            f"support: map {M.shape} incompatible with ellipsoid dim {E.dim} "
            f"and direction of length {a.shape[0]}"
        )
    w = M.T @ a
    z = sla.solve_triangular(E.factor, w, lower=True)
    return float(w @ E.center + np.linalg.norm(z))


def tighten_halfspace(g, b: float, images: Sequence[tuple[np.ndarray, Ellipsoid]]) -> float:
    """Offset of the row ``g v ≤ b`` after subtracting every image ``M_j E_j``.

    Each ``E_j`` is used with its own center; tube error sets are centered at the origin.
    """
    g = _as_vector(g, "g")
    return float(b) - sum(support(E, M, g) for M, E in images)


def sample_in(E: Ellipsoid, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform draw in the unit ball pushed through the inverse Cholesky factor."""
    count = 1 if size is None else size
    z = rng.standard_normal((count, E.dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    z *= rng.random((count, 1)) ** (1.0 / E.dim)
    v = _push(E, z)
    return v[0] if size is None else v


def sample_on_boundary(
    E: Ellipsoid, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    count = 1 if size is None else size
    z = rng.standard_normal((count, E.dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    v = _push(E, z)
    return v[0] if size is None else v


def _push(E: Ellipsoid, z: np.ndarray) -> np.ndarray:
    if z.shape[0] == 0:
        return np.empty((0, E.dim))
    # vᵀ F Fᵀ v = ‖z‖² for v = F⁻ᵀ z
    v = sla.solve_triangular(E.factor.T, z.T, lower=False).T
    return v + E.center


def bound_certificate_matrix(
    shapes: Sequence[np.ndarray], maps: Sequence[np.ndarray], bound: float
) -> np.ndarray:
    """Matrix whose positive semidefiniteness certifies ``|Σ G_i v_i| ≤ bound``
    for all ``v_i ∈ E(P_i)``.

    Layout: ``blockdiag(P_i / k)`` bordered by the stacked ``G_iᵀ`` with corner ``bound²``.
    """
    k = len(shapes)
    if k == 0 or k != len(maps):
        raise GeometryError("need one row map per ellipsoid")
    diag = sla.block_diag(*[np.asarray(P, dtype=float) / k for P in shapes])
    col = np.concatenate([_as_matrix(G, "map").reshape(-1) for G in maps])
    if col.shape[0] != diag.shape[0]:
        raise GeometryError("row maps do not match ellipsoid dimensions")
    top = np.hstack([diag, col[:, None]])
    bottom = np.hstack([col[None, :], np.array([[bound**2]])])
    return np.vstack([top, bottom])


def sum_bound_oracle(
    ellipsoids: Sequence[Ellipsoid],
    maps: Sequence[np.ndarray],
    bound: float,
    rng: np.random.Generator | None = None,
    n_samples: int = 100_000,
) -> bool:
    """Brute-force check of ``|Σ G_i v_i| ≤ bound`` with each ``v_i`` sampled in ``E_i``.

    Half of the draws sit on the boundaries, where the maximum is attained.
    """
    rng = rng or np.random.default_rng(0)
    half = n_samples // 2
    total = np.zeros(n_samples)
    for E, G in zip(ellipsoids, maps):
        g = _as_matrix(G, "map").reshape(-1)
        if g.shape[0] != E.dim:
            raise GeometryError("row map does not match ellipsoid dimension")
        pts = np.vstack(
            [sample_on_boundary(E, rng, half), sample_in(E, rng, n_samples - half)]
        )
        total += pts @ g
    return bool(np.max(np.abs(total)) <= bound * (1.0 + 1e-12))


@dataclass(frozen=True, eq=False)
class Polytope:
    """``{v : G v ≤ b}``."""

    G: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        G = _as_matrix(self.G, "G")
        b = _as_vector(self.b, "b")
        if G.shape[0] != b.shape[0]:
            raise GeometryError(f"G has {G.shape[0]} rows but b has {b.shape[0]}", cause="b")
        if np.any(np.all(G == 0.0, axis=1)):
            raise GeometryError("polytope has a zero row", cause="G")
        if not (np.all(np.isfinite(G)) and np.all(np.isfinite(b))):
            raise GeometryError("polytope has non-finite entries", cause="G")
        object.__setattr__(self, "G", _readonly(G))
        object.__setattr__(self, "b", _readonly(b))

    @classmethod
    def from_box(cls, lower, upper) -> "Polytope":
        lower = _as_vector(lower, "lower")
        upper = _as_vector(upper, "upper")
        n = lower.shape[0]
        return cls(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([upper, -lower]))

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    @property
    def n_rows(self) -> int:
        return self.G.shape[0]

    def slack(self, v) -> np.ndarray:
        return self.b - self.G @ _as_vector(v, "v")

    def contains(self, v, tol: float = 0.0) -> bool:
        return bool(np.all(self.slack(v) >= -tol))

    def with_offsets(self, b) -> "Polytope":
        return Polytope(self.G, b)

    def is_empty(self) -> bool:
        if np.all(self.b >= 0.0):
            return False
        res = linprog(
            np.zeros(self.dim),
            A_ub=self.G,
            b_ub=self.b,
            bounds=[(None, None)] * self.dim,
            method="highs",
        )
        return res.status == 2


@dataclass(frozen=True, eq=False)
class Box:
    """Symmetric box ``|v_i| ≤ half_widths[i]``; ``inf`` means unconstrained."""

    half_widths: np.ndarray

    def __post_init__(self) -> None:
        hw = _as_vector(self.half_widths, "half_widths")
        if np.any(np.isnan(hw)) or np.any(hw <= 0.0):
            raise GeometryError("box half widths must be positive or +inf", cause="half_widths")
        object.__setattr__(self, "half_widths", _readonly(hw))

    @property
    def dim(self) -> int:
        return self.half_widths.shape[0]

    @property
    def active(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(np.isfinite(self.half_widths)))

    def contains(self, v, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(_as_vector(v, "v")) <= self.half_widths + tol))

    def intersect(self, other: "Box") -> "Box":
        return Box(np.minimum(self.half_widths, other.half_widths))


def sample_product(
    ellipsoids: Sequence[Ellipsoid],
    rng: np.random.Generator,
    size: int,
    boundary_fraction: float = 0.5,
) -> list[np.ndarray]:
    """Joint draws with a share of boundary points for stress testing invariance."""
    n_boundary = int(size * boundary_fraction)
    parts = []
    for E in ellipsoids:
        parts.append(
            np.vstack(
                [sample_on_boundary(E, rng, n_boundary), sample_in(E, rng, size - n_boundary)]
            )
        )
    return parts
