"""Declarative LMI problems on top of cvxpy.

Blocks are plain functions of a variable mapping. The same function is evaluated once with
cvxpy expressions to build the cone program and again with the returned numeric values to
re-certify the solution by dense eigen-decomposition, outside the solver.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Mapping, Sequence

import cvxpy as cp
import numpy as np
import scipy.sparse as sps

from deltiss.control.errors import SdpError

logger = logging.getLogger(__name__)

TOL_PSD = 1e-7
SOLVER_PREFERENCE = ("CLARABEL", "SCS")

BlockFn = Callable[[Mapping[str, Any]], Any]


class VariableKind(str, Enum):
    SYMMETRIC = "symmetric"
    DIAGONAL = "diagonal"
    SCALAR = "scalar"
    RECTANGULAR = "rectangular"


class LmiStatus(str, Enum):
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class MatrixVariable:
    name: str
    kind: VariableKind
    rows: int
    cols: int


@dataclass(frozen=True)
class LmiBlock:
    label: str
    fn: BlockFn
    margin: float = 0.0


@dataclass
class LmiSolution:
    status: LmiStatus
    values: dict[str, np.ndarray] = field(default_factory=dict)
    block_min_eigs: dict[str, float] = field(default_factory=dict)
    objective_value: float | None = None
    solver_status: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == LmiStatus.FEASIBLE

    @property
    def worst_block(self) -> tuple[str, float] | None:
        if not self.block_min_eigs:
            return None
        label = min(self.block_min_eigs, key=self.block_min_eigs.__getitem__)
        return label, self.block_min_eigs[label]


@dataclass
class ConicForm:
    """Standard form ``min cᵀx  s.t.  b - A x ∈ K`` as produced by the backend."""

    c: np.ndarray
    A: sps.csc_matrix
    b: np.ndarray
    psd_sizes: list[int]
    solver: str

    @property
    def n_vars(self) -> int:
        return int(self.c.shape[0])

    def to_triplets(self) -> str:
        """One entry per line: ``block row col value`` with block in {c, A, b}."""
        lines = [f"# solver={self.solver} n_vars={self.n_vars} psd={self.psd_sizes}"]
        for j, value in enumerate(self.c):
            if value != 0.0:
                lines.append(f"c 0 {j} {value!r}")
        coo = self.A.tocoo()
        for i, j, value in zip(coo.row, coo.col, coo.data):
            lines.append(f"A {i} {j} {value!r}")
        for i, value in enumerate(self.b):
            if value != 0.0:
                lines.append(f"b {i} 0 {value!r}")
        return "\n".join(lines) + "\n"


def _is_expr(value: Any) -> bool:
    return isinstance(value, cp.Expression)


def sym_blocks(sizes: Sequence[int], entries: Mapping[tuple[int, int], Any]) -> Any:
    """Symmetric block matrix from its upper-triangular entries; missing entries are zero.

    Works on numpy arrays and cvxpy expressions alike.
    """
    k = len(sizes)
    grid: list[list[Any]] = []
    symbolic = any(_is_expr(v) for v in entries.values())
    for i in range(k):
        row = []
        for j in range(k):
            if (i, j) in entries and i <= j:
                block = entries[(i, j)]
            elif (j, i) in entries and j < i:
                block = entries[(j, i)].T
            else:
                block = np.zeros((sizes[i], sizes[j]))
            if not _is_expr(block):
                block = np.asarray(block, dtype=float).reshape(sizes[i], sizes[j])
            row.append(block)
        grid.append(row)
    if symbolic:
        return cp.bmat(grid)
    return np.block(grid)


def hcat(parts: Sequence[Any]) -> Any:
    if any(_is_expr(p) for p in parts):
        return cp.hstack(list(parts))
    return np.hstack(parts)


def vcat(parts: Sequence[Any]) -> Any:
    if any(_is_expr(p) for p in parts):
        return cp.vstack(list(parts))
    return np.vstack(parts)


def trace(value: Any) -> Any:
    return cp.trace(value) if _is_expr(value) else float(np.trace(value))


def scalar(value: Any) -> Any:
    """Collapse a 1×1 matrix to a scalar expression or float."""
    return cp.sum(value) if _is_expr(value) else float(np.sum(value))


class LmiProblem:
    """A set of matrix variables, PSD blocks and an optional linear objective."""

    def __init__(self, name: str = "lmi") -> None:
        self.name = name
        self.variables: dict[str, MatrixVariable] = {}
        self.blocks: list[LmiBlock] = []
        self._objective: BlockFn | None = None
        self._sense = 1.0

    def _declare(self, name: str, kind: VariableKind, rows: int, cols: int) -> str:
        if name in self.variables:
            raise SdpError(f"variable '{name}' declared twice", cause=name)
        self.variables[name] = MatrixVariable(name, kind, rows, cols)
        return name

    def symmetric(self, name: str, k: int) -> str:
        return self._declare(name, VariableKind.SYMMETRIC, k, k)

    def diagonal(self, name: str, k: int) -> str:
        return self._declare(name, VariableKind.DIAGONAL, k, k)

    def scalar(self, name: str) -> str:
        return self._declare(name, VariableKind.SCALAR, 1, 1)

    def rectangular(self, name: str, rows: int, cols: int) -> str:
        return self._declare(name, VariableKind.RECTANGULAR, rows, cols)

    def require_psd(self, label: str, fn: BlockFn, margin: float = 0.0) -> None:
        if any(block.label == label for block in self.blocks):
            raise SdpError(f"block '{label}' declared twice", cause=label)
        self.blocks.append(LmiBlock(label, fn, margin))

    def minimize(self, fn: BlockFn) -> None:
        self._objective, self._sense = fn, 1.0

    def maximize(self, fn: BlockFn) -> None:
        self._objective, self._sense = fn, -1.0

    def evaluate(self, values: Mapping[str, Any]) -> dict[str, np.ndarray]:
        """Numeric value of every block for the given variable values."""
        return {
            block.label: np.atleast_2d(np.asarray(block.fn(values), dtype=float))
            for block in self.blocks
        }

    def objective_value(self, values: Mapping[str, Any]) -> float | None:
        if self._objective is None:
            return None
        return float(np.sum(self._objective(values)))

    def to_cvxpy(self) -> tuple[cp.Problem, dict[str, cp.Variable]]:
        if not self.blocks:
            raise SdpError(f"LMI problem '{self.name}' has no blocks", cause="empty_blocks")
        raw: dict[str, cp.Variable] = {}
        exprs: dict[str, Any] = {}
        for var in self.variables.values():
            if var.kind == VariableKind.SYMMETRIC:
                raw[var.name] = cp.Variable((var.rows, var.rows), symmetric=True, name=var.name)
                exprs[var.name] = raw[var.name]
            elif var.kind == VariableKind.DIAGONAL:
                raw[var.name] = cp.Variable(var.rows, name=var.name)
                exprs[var.name] = cp.diag(raw[var.name])
            else:
                raw[var.name] = cp.Variable((var.rows, var.cols), name=var.name)
                exprs[var.name] = raw[var.name]

        constraints = []
        for block in self.blocks:
            M = block.fn(exprs)
            if not _is_expr(M):
                M = cp.Constant(np.atleast_2d(np.asarray(M, dtype=float)))
            if M.shape[0] != M.shape[1]:
                raise SdpError(f"block '{block.label}' is not square: {M.shape}", cause=block.label)
            k = M.shape[0]
            constraints.append((M + M.T) / 2 - block.margin * np.eye(k) >> 0)

        if self._objective is None:
            objective = cp.Minimize(0)
        else:
            objective = cp.Minimize(self._sense * cp.sum(self._objective(exprs)))
        problem = cp.Problem(objective, constraints)

        used = {v.name() for v in problem.variables()}
        for name in raw:
            if name not in used:
                logger.warning(f"LMI problem '{self.name}': variable '{name}' is never referenced")
        return problem, raw


def select_solver(preferred: str | None = None) -> str:
    installed = set(cp.installed_solvers())
    wanted = preferred or os.getenv("DELTISS_SOLVER")
    if wanted:
        if wanted.upper() not in installed:
            raise SdpError(f"conic solver '{wanted}' is not installed", cause="solver")
        return wanted.upper()
    for name in SOLVER_PREFERENCE:
        if name in installed:
            return name
    raise SdpError(f"no SDP-capable solver among {sorted(installed)}", cause="solver")


def _solver_options(solver: str, max_iter: int) -> dict[str, Any]:
    if solver == "CLARABEL":
        return {
            "max_iter": max_iter,
            "tol_gap_abs": 1e-9,
            "tol_gap_rel": 1e-9,
            "tol_feas": 1e-9,
        }
    if solver == "SCS":
        return {"max_iters": max(max_iter, 20_000), "eps_abs": 1e-9, "eps_rel": 1e-9}
    return {}


def compile(problem: LmiProblem, solver: str | None = None) -> ConicForm:
    """Cone program handed to the backend (symmetric variables vectorized by cvxpy)."""
    name = select_solver(solver)
    cvx_problem, _ = problem.to_cvxpy()
    data, _, _ = cvx_problem.get_problem_data(name)
    dims = data["dims"]
    return ConicForm(
        c=np.asarray(data["c"], dtype=float),
        A=sps.csc_matrix(data["A"]),
        b=np.asarray(data["b"], dtype=float),
        psd_sizes=[int(k) for k in getattr(dims, "psd", [])],
        solver=name,
    )


def min_eig(M) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return float(np.min(np.linalg.eigvalsh(0.5 * (M + M.T))))


def check_psd(M, tol: float = TOL_PSD) -> bool:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise SdpError(f"matrix is not square: {M.shape}", cause="asymmetric")
    scale = max(float(np.max(np.abs(M))) if M.size else 0.0, 1.0)
    if np.max(np.abs(M - M.T)) > 1e-10 * scale:
        raise SdpError("matrix is not symmetric", cause="asymmetric")
    return min_eig(M) >= -tol


def numeric_values(problem: LmiProblem, raw: Mapping[str, cp.Variable]) -> dict[str, np.ndarray]:
    values: dict[str, np.ndarray] = {}
    for name, var in raw.items():
        if var.value is None:
            raise SdpError(f"variable '{name}' has no value", cause=name)
        value = np.asarray(var.value, dtype=float)
        kind = problem.variables[name].kind
        if kind == VariableKind.DIAGONAL:
            value = np.diag(value.reshape(-1))
        elif kind == VariableKind.SYMMETRIC:
            value = 0.5 * (value + value.T)
        else:
            value = np.atleast_2d(value)
        values[name] = value
    return values


def certify(problem: LmiProblem, values: Mapping[str, Any]) -> dict[str, float]:
    """Smallest eigenvalue of every block at the given values."""
    return {label: min_eig(M) for label, M in problem.evaluate(values).items()}


def solve(
    problem: LmiProblem,
    tol_psd: float = TOL_PSD,
    max_iter: int = 200,
    solver: str | None = None,
) -> LmiSolution:
    name = select_solver(solver)
    cvx_problem, raw = problem.to_cvxpy()
    try:
        cvx_problem.solve(solver=name, **_solver_options(name, max_iter))
    except cp.error.SolverError as exc:
        logger.debug(f"LMI problem '{problem.name}': solver error {exc}")
        return LmiSolution(LmiStatus.NUMERICAL_FAILURE, solver_status="solver_error")

    status = cvx_problem.status
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return LmiSolution(LmiStatus.INFEASIBLE, solver_status=status)
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        return LmiSolution(LmiStatus.NUMERICAL_FAILURE, solver_status=str(status))

    try:
        values = numeric_values(problem, raw)
    except SdpError:
        return LmiSolution(LmiStatus.NUMERICAL_FAILURE, solver_status=status)
    eigs = certify(problem, values)
    certified = all(e >= -tol_psd for e in eigs.values())
    if not certified:
        label = min(eigs, key=eigs.__getitem__)
        logger.debug(
            f"LMI problem '{problem.name}': solver reported {status} but block "
            f"'{label}' has min eigenvalue {eigs[label]:.3e}"
        )
    return LmiSolution(
        status=LmiStatus.FEASIBLE if certified else LmiStatus.NUMERICAL_FAILURE,
        values=values,
        block_min_eigs=eigs,
        objective_value=problem.objective_value(values),
        solver_status=status,
    )
