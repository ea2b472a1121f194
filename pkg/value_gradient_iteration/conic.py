"""
Thin layer over a conic solver.

Programs are stated in the standard form

    minimize    1/2 z^T Q z + q^T z + const
    subject to  E z = b,   G z <= h,
                ||S_k z + s_k||_2 <= t_k^T z + r_k,
                F0_j + sum_i z_i F_ij  PSD,

and solved with cvxpy/Clarabel. Equality duals follow the convention
grad(objective) = -E^T nu at the optimum, so for a pinned variable z = x the
derivative of the optimal value with respect to x is -nu.

Every solve compiles a fresh cvxpy problem from constant data, so results
depend only on the program and the tolerances.
"""
import logging
from dataclasses import dataclass
from enum import Enum

import cvxpy as cp
import numpy as np

from .model import PSD_TOL, min_eigenvalue, symmetrize

logger = logging.getLogger(__name__)


class SolveStatus(str, Enum):
    OPTIMAL = 'optimal'
    INFEASIBLE = 'infeasible'
    UNBOUNDED = 'unbounded'
    INACCURATE = 'inaccurate'


@dataclass(frozen=True)
class SolverTolerances:
    abs_gap: float = 1e-8
    rel_gap: float = 1e-8
    feasibility: float = 1e-8

    def solver_options(self):
        return {
            'tol_gap_abs': self.abs_gap,
            'tol_gap_rel': self.rel_gap,
            'tol_feas': self.feasibility,
        }


DEFAULT_TOLERANCES = SolverTolerances()
FIT_TOLERANCES = SolverTolerances(1e-7, 1e-7, 1e-7)


@dataclass(frozen=True)
class SocBlock:
    """||matrix z + offset||_2 <= direction^T z + constant."""
    matrix: np.ndarray
    offset: np.ndarray
    direction: np.ndarray
    constant: float = 0.0


@dataclass(frozen=True)
class PsdBlock:
    """constant + sum_i z_i coefficients[i] is positive semidefinite."""
    constant: np.ndarray
    coefficients: np.ndarray

    @property
    def size(self):
        return self.constant.shape[0]


@dataclass(frozen=True)
class ConicProgram:
    n_vars: int
    objective_matrix: np.ndarray
    objective_vector: np.ndarray
    objective_constant: float = 0.0
    eq_matrix: np.ndarray = None
    eq_rhs: np.ndarray = None
    ineq_matrix: np.ndarray = None
    ineq_rhs: np.ndarray = None
    soc_blocks: tuple = ()
    psd_blocks: tuple = ()

    def __post_init__(self):
        n = self.n_vars
        Q = symmetrize(np.asarray(self.objective_matrix, dtype=float).reshape(n, n))
        scale = max(1.0, float(np.max(np.abs(Q))) if Q.size else 1.0)
        if min_eigenvalue(Q) < -PSD_TOL * scale:
            raise ValueError("Objective matrix is not positive semidefinite")
        object.__setattr__(self, 'objective_matrix', Q)
        object.__setattr__(self, 'objective_vector',
                           np.asarray(self.objective_vector, dtype=float).reshape(n))
        for rows_name, rhs_name in (('eq_matrix', 'eq_rhs'), ('ineq_matrix', 'ineq_rhs')):
            rhs = getattr(self, rhs_name)
            rhs = np.zeros(0) if rhs is None else np.asarray(rhs, dtype=float).reshape(-1)
            rows = getattr(self, rows_name)
            rows = np.zeros((0, n)) if rows is None else np.asarray(rows, dtype=float)
            if rows.size != rhs.shape[0] * n:
                raise ValueError(f"{rows_name} does not have {rhs.shape[0]} rows of length {n}")
            rows = rows.reshape(rhs.shape[0], n)
            object.__setattr__(self, rows_name, rows)
            object.__setattr__(self, rhs_name, rhs)
        for block in self.soc_blocks:
            if block.matrix.shape[1] != n or block.direction.shape != (n,):
                raise ValueError("Second-order cone block is not dimension-consistent")
        for block in self.psd_blocks:
            d = block.size
            if block.coefficients.shape != (n, d, d):
                raise ValueError("PSD block is not dimension-consistent")


@dataclass(frozen=True)
class ConicSolution:
    status: SolveStatus
    primal: np.ndarray
    eq_duals: np.ndarray
    objective: float

    @property
    def optimal(self):
        return self.status == SolveStatus.OPTIMAL

    @property
    def usable(self):
        """Optimal, or inaccurate with a finite primal iterate."""
        return self.optimal or (self.status == SolveStatus.INACCURATE
                                and bool(np.all(np.isfinite(self.primal))))


class ProgramBuilder:
    """
    Incrementally assembles a ConicProgram from named variable blocks.

    Column arguments are slices or index arrays returned by `variables`.
    """

    def __init__(self):
        self.n_vars = 0
        self.blocks = {}
        self._quadratic = []
        self._linear = []
        self._constant = 0.0
        self._eq = []
        self._ineq = []
        self._soc = []
        self._psd = []

    def variables(self, name, size):
        block = np.arange(self.n_vars, self.n_vars + size)
        self.blocks[name] = block
        self.n_vars += size
        return block

    def add_quadratic(self, columns, matrix):
        """Objective += 1/2 z[columns]^T matrix z[columns]."""
        self._quadratic.append((np.asarray(columns), np.asarray(matrix, dtype=float)))

    def add_linear(self, columns, vector):
        self._linear.append((np.asarray(columns), np.asarray(vector, dtype=float).reshape(-1)))

    def add_constant(self, value):
        self._constant += float(value)

    def add_equalities(self, columns, matrix, rhs):
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        if matrix.shape[0]:
            self._eq.append((np.asarray(columns), matrix, np.asarray(rhs, dtype=float).reshape(-1)))

    def add_inequalities(self, columns, matrix, rhs):
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        if matrix.shape[0]:
            self._ineq.append((np.asarray(columns), matrix, np.asarray(rhs, dtype=float).reshape(-1)))

    def add_soc(self, columns, matrix, offset, direction, constant=0.0):
        self._soc.append((np.asarray(columns), np.atleast_2d(np.asarray(matrix, dtype=float)),
                          np.asarray(offset, dtype=float).reshape(-1),
                          np.asarray(direction, dtype=float).reshape(-1), float(constant)))

    def add_psd(self, constant, columns, coefficients):
        self._psd.append((np.atleast_2d(np.asarray(constant, dtype=float)), np.asarray(columns),
                          np.asarray(coefficients, dtype=float)))

    def _rows(self, entries):
        if not entries:
            return np.zeros((0, self.n_vars)), np.zeros(0)
        matrices, vectors = [], []
        for columns, matrix, rhs in entries:
            full = np.zeros((matrix.shape[0], self.n_vars))
            full[:, columns] = matrix
            matrices.append(full)
            vectors.append(rhs)
        return np.vstack(matrices), np.concatenate(vectors)

    def build(self):
        n = self.n_vars
        Q = np.zeros((n, n))
        for columns, matrix in self._quadratic:
            Q[np.ix_(columns, columns)] += matrix
        q = np.zeros(n)
        for columns, vector in self._linear:
            q[columns] += vector
        eq_matrix, eq_rhs = self._rows(self._eq)
        ineq_matrix, ineq_rhs = self._rows(self._ineq)
        socs = []
        for columns, matrix, offset, direction, constant in self._soc:
            full = np.zeros((matrix.shape[0], n))
            full[:, columns] = matrix
            full_direction = np.zeros(n)
            full_direction[columns] = direction
            socs.append(SocBlock(full, offset, full_direction, constant))
        psds = []
        for constant, columns, coefficients in self._psd:
            full = np.zeros((n,) + constant.shape)
            full[columns] = coefficients
            psds.append(PsdBlock(symmetrize(constant), full))
        return ConicProgram(n, Q, q, self._constant, eq_matrix, eq_rhs, ineq_matrix, ineq_rhs,
                            tuple(socs), tuple(psds))


@dataclass
class _CompiledProgram:
    problem: cp.Problem
    z: cp.Variable
    equality: cp.Constraint = None


def _psd_factor(matrix):
    eigenvalues, eigenvectors = np.linalg.eigh(symmetrize(matrix))
    cutoff = 1e-12 * max(1.0, float(np.max(np.abs(eigenvalues))) if eigenvalues.size else 1.0)
    keep = eigenvalues > cutoff
    return np.sqrt(eigenvalues[keep])[:, None] * eigenvectors[:, keep].T


class ConicSolver:
    """
    Solves ConicPrograms with cvxpy. Each call compiles a fresh cvxpy problem,
    so a result never depends on earlier solves.
    """

    def __init__(self, solver=cp.CLARABEL):
        self.solver = solver

    def solve(self, prog, tolerances=None):
        """
        Solve a conic program.

        Args:
            prog: ConicProgram
            tolerances: SolverTolerances, defaults to 1e-8 absolute/relative

        Returns:
            ConicSolution; solver failures are reported through the status
        """
        tolerances = tolerances or DEFAULT_TOLERANCES
        compiled = self._compile(prog)
        n = prog.n_vars
        primal = np.full(n, np.nan)
        eq_duals = np.full(prog.eq_matrix.shape[0], np.nan)

        try:
            compiled.problem.solve(solver=self.solver, **tolerances.solver_options())
        except cp.error.SolverError as e:
            logger.debug(f"Solver failed: {str(e)}")
            return ConicSolution(SolveStatus.INACCURATE, primal, eq_duals, np.nan)

        status = self._map_status(compiled.problem.status)
        if compiled.z.value is not None:
            primal = np.array(compiled.z.value, dtype=float).reshape(n)
        if compiled.equality is not None and compiled.equality.dual_value is not None:
            eq_duals = np.array(compiled.equality.dual_value, dtype=float).reshape(-1)
        value = compiled.problem.value
        if status == SolveStatus.INFEASIBLE:
            objective = np.inf
        elif status == SolveStatus.UNBOUNDED:
            objective = -np.inf
        elif value is None or not np.all(np.isfinite(primal)):
            objective = np.nan
        else:
            objective = float(value) + prog.objective_constant
        logger.debug(f"Conic solve with {n} variables: {status.value}")
        return ConicSolution(status, primal, eq_duals, objective)

    @staticmethod
    def _map_status(status):
        if status == cp.OPTIMAL:
            return SolveStatus.OPTIMAL
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return SolveStatus.INFEASIBLE
        if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
            return SolveStatus.UNBOUNDED
        return SolveStatus.INACCURATE

    def _compile(self, prog):
        n = prog.n_vars
        z = cp.Variable(n)
        objective = prog.objective_vector @ z
        factor = _psd_factor(prog.objective_matrix)
        if factor.shape[0]:
            objective = objective + 0.5 * cp.sum_squares(factor @ z)

        constraints = []
        equality = None
        if prog.eq_matrix.shape[0]:
            equality = prog.eq_matrix @ z == prog.eq_rhs
            constraints.append(equality)
        if prog.ineq_matrix.shape[0]:
            constraints.append(prog.ineq_matrix @ z <= prog.ineq_rhs)
        for block in prog.soc_blocks:
            constraints.append(cp.SOC(block.direction @ z + block.constant,
                                      block.matrix @ z + block.offset))
        for block in prog.psd_blocks:
            constraints += self._psd_constraints(block, z)

        return _CompiledProgram(cp.Problem(cp.Minimize(objective), constraints), z, equality)

    @staticmethod
    def _psd_constraints(block, z):
        # Symmetric slack S equal to the affine slab on its upper triangle.
        d = block.size
        S = cp.Variable((d, d), symmetric=True)
        rows, cols = np.triu_indices(d)
        flat = cols * d + rows
        selector = np.zeros((rows.size, d * d))
        selector[np.arange(rows.size), flat] = 1.0
        coefficients = block.coefficients.reshape(block.coefficients.shape[0], -1)
        coefficients = coefficients[:, rows * d + cols].T
        return [
            S >> 0,
            selector @ cp.reshape(S, (d * d,), order='F') == block.constant[rows, cols] + coefficients @ z,
        ]


_default_solver = ConicSolver()


def solve(prog, tolerances=None):
    """Solve `prog` with the process-wide solver instance."""
    return _default_solver.solve(prog, tolerances)
