"""
Fitting convex quadratics to Bellman data.

Gradient fitting (VGI) matches P x + p to sampled gradients of T V; value
fitting (FVI) matches 1/2 x^T P x + p^T x + c to sampled values. Both are
single conic programs over theta = (P, p) with P kept positive semidefinite,
either directly or through the lower-bound LMI

    [[P - P_lb, p - p_lb], [(p - p_lb)^T, s]]  PSD,

which certifies V + const >= V_lb pointwise.
"""
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .conic import DEFAULT_TOLERANCES, FIT_TOLERANCES, ConicSolution, ProgramBuilder, SolveStatus, solve
from .exceptions import FittingError
from .model import PSD_TOL, QuadraticFunction, min_eigenvalue, psd_project, symmetrize

logger = logging.getLogger(__name__)

LOSSES = ('squared', 'huber')
# Eigenvalues of a fitted P below FACE_FACTOR * sqrt(gap) * scale are treated as zero.
FACE_FACTOR = 30.0
POLISH_SLACK = 10.0


@dataclass(frozen=True)
class FitOptions:
    """
    Loss, regularization and constraint menu for both fits.

    Args:
        loss: 'squared' (1/2 ||r||^2) or 'huber' (circular Huber with radius huber_m)
        huber_m: Huber transition radius, > 0
        ridge: Weight of ||P||_F^2 + ||p||^2
        lasso: Weight of sum |P_ij| + ||p||_1
        symmetric: Force p = 0
        fixed_minimizer: Optional x* with P x* + p = 0
        lower_bound: Optional QuadraticFunction V_lb; replaces P PSD by the
            dominance LMI
        tolerances: Solver tolerances for the fitting program
    """
    loss: str = 'huber'
    huber_m: float = 1.0
    ridge: float = 0.0
    lasso: float = 0.0
    symmetric: bool = False
    fixed_minimizer: tuple = None
    lower_bound: QuadraticFunction = None
    tolerances: object = FIT_TOLERANCES

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"Unknown loss '{self.loss}', expected one of {LOSSES}")
        if self.huber_m <= 0:
            raise ValueError(f"Huber radius must be positive, got {self.huber_m}")
        if self.ridge < 0 or self.lasso < 0:
            raise ValueError("Regularization weights must be nonnegative")
        if self.fixed_minimizer is not None:
            object.__setattr__(self, 'fixed_minimizer',
                               tuple(float(v) for v in np.asarray(self.fixed_minimizer).reshape(-1)))

    def with_lower_bound(self, V_lb):
        return replace(self, lower_bound=V_lb)

    def to_dict(self):
        return {
            'loss': self.loss,
            'huber_m': self.huber_m,
            'ridge': self.ridge,
            'lasso': self.lasso,
            'symmetric': self.symmetric,
            'fixed_minimizer': None if self.fixed_minimizer is None else list(self.fixed_minimizer),
            'lower_bound': self.lower_bound is not None,
        }


@dataclass(frozen=True)
class FitSample:
    """A state with either a gradient target (vector) or a value target (scalar)."""
    x: np.ndarray
    target: object

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1)
        target = np.asarray(self.target, dtype=float)
        if target.ndim > 1:
            raise ValueError("Fit targets must be scalars or vectors")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(target))):
            raise ValueError("Fit samples must have finite entries")
        object.__setattr__(self, 'x', x)
        object.__setattr__(self, 'target', float(target) if target.ndim == 0 else target)

    @property
    def is_gradient(self):
        return isinstance(self.target, np.ndarray)


def huber(z, M=1.0):
    """Circular Huber loss: 1/2 ||z||^2 inside radius M, M (||z|| - M/2) outside."""
    if M <= 0:
        raise ValueError(f"Huber radius must be positive, got {M}")
    norm = float(np.linalg.norm(np.atleast_1d(np.asarray(z, dtype=float))))
    if norm <= M:
        return 0.5 * norm ** 2
    return M * (norm - 0.5 * M)


def _loss(residual, opts):
    if opts.loss == 'squared':
        return 0.5 * float(np.sum(np.square(residual)))
    return huber(residual, opts.huber_m)


class _Layout:
    """Upper-triangular parametrization of P plus p (and an offset)."""

    def __init__(self, n):
        self.n = n
        self.rows, self.cols = np.triu_indices(n)
        self.diagonal = self.rows == self.cols
        # |P_ij| and P_ij^2 sums count each off-diagonal parameter twice.
        self.weights = np.where(self.diagonal, 1.0, 2.0)

    @property
    def size(self):
        return self.rows.size

    def gradient_design(self, x):
        """Matrix G with P x = G svec(P)."""
        k = np.arange(self.size)
        G = np.zeros((self.n, self.size))
        G[self.rows, k] += x[self.cols]
        off = ~self.diagonal
        G[self.cols[off], k[off]] += x[self.rows[off]]
        return G

    def value_design(self, x):
        """Row h with 1/2 x^T P x = h . svec(P)."""
        return np.where(self.diagonal, 0.5, 1.0) * x[self.rows] * x[self.cols]

    def basis(self):
        """Stack of symmetric basis matrices E_k."""
        E = np.zeros((self.size, self.n, self.n))
        k = np.arange(self.size)
        E[k, self.rows, self.cols] = 1.0
        E[k, self.cols, self.rows] = 1.0
        return E

    def matrix(self, svec):
        P = np.zeros((self.n, self.n))
        P[self.rows, self.cols] = svec
        P[self.cols, self.rows] = svec
        return P

    def face_map(self, U):
        """Reduced layout for S and the matrix T with svec(U S U^T) = T svec(S)."""
        reduced = _Layout(U.shape[1])
        images = np.einsum('ia,kab,jb->kij', U, reduced.basis(), U)
        return reduced, images[:, self.rows, self.cols].T.reshape(self.size, reduced.size)


def _check_samples(samples, gradient):
    if not samples:
        raise ValueError("At least one fit sample is required")
    n = samples[0].x.size
    for sample in samples:
        if sample.x.size != n:
            raise ValueError("Fit samples have inconsistent state dimensions")
        if sample.is_gradient != gradient:
            raise ValueError("Gradient fits need vector targets and value fits scalar targets")
        if gradient and sample.target.size != n:
            raise ValueError("Gradient targets must have the state dimension")
    return n


@dataclass
class _FitProgram:
    program: object
    svec_map: np.ndarray
    s_cols: np.ndarray
    p_cols: np.ndarray
    c_cols: np.ndarray


def _build_fit(samples, opts, gradient, layout, face=None):
    """
    Assemble the fitting program. With `face` = U the matrix is restricted to
    P = U S U^T with S PSD, and svec(P) = svec_map @ svec(S).
    """
    n = layout.n
    if face is None:
        reduced, svec_map = layout, np.eye(layout.size)
    else:
        reduced, svec_map = layout.face_map(face)
    count = len(samples)
    builder = ProgramBuilder()
    s_cols = builder.variables('P', reduced.size)
    p_cols = np.zeros(0, dtype=int) if opts.symmetric else builder.variables('p', n)
    c_cols = np.zeros(0, dtype=int) if gradient else builder.variables('offset', 1)
    theta = np.concatenate([s_cols, p_cols, c_cols])

    designs, targets = [], []
    for sample in samples:
        if gradient:
            blocks = [layout.gradient_design(sample.x) @ svec_map]
            if not opts.symmetric:
                blocks.append(np.eye(n))
            designs.append(np.hstack(blocks))
            targets.append(sample.target)
        else:
            row = [layout.value_design(sample.x) @ svec_map]
            if not opts.symmetric:
                row.append(sample.x)
            row.append([1.0])
            designs.append(np.concatenate(row)[None, :])
            targets.append(np.array([sample.target]))

    if opts.loss == 'squared':
        D = np.vstack(designs)
        y = np.concatenate(targets)
        builder.add_quadratic(theta, D.T @ D / count)
        builder.add_linear(theta, -D.T @ y / count)
        builder.add_constant(0.5 * y @ y / count)
    else:
        for i, (D, y) in enumerate(zip(designs, targets)):
            a = builder.variables(f'inlier{i}', y.size)
            t = builder.variables(f'outlier{i}', 1)
            builder.add_quadratic(a, np.eye(y.size) / count)
            builder.add_linear(t, [opts.huber_m / count])
            columns = np.concatenate([theta, a, t])
            direction = np.zeros(columns.size)
            direction[-1] = 1.0
            builder.add_soc(columns, np.hstack([D, -np.eye(y.size), np.zeros((y.size, 1))]),
                            -y, direction)

    regularized = np.concatenate([s_cols, p_cols])
    # Entries of (svec(P), p) as a linear map of the regularized columns.
    entries = np.zeros((layout.size + p_cols.size, regularized.size))
    entries[:layout.size, :s_cols.size] = svec_map
    entries[layout.size:, s_cols.size:] = np.eye(p_cols.size)
    weights = np.concatenate([layout.weights, np.ones(p_cols.size)])
    if opts.ridge > 0:
        builder.add_quadratic(regularized, 2.0 * opts.ridge * entries.T @ np.diag(weights) @ entries)
    if opts.lasso > 0:
        e = builder.variables('lasso', weights.size)
        builder.add_linear(e, opts.lasso * weights)
        identity = np.eye(weights.size)
        columns = np.concatenate([regularized, e])
        builder.add_inequalities(columns, np.hstack([entries, -identity]), np.zeros(weights.size))
        builder.add_inequalities(columns, np.hstack([-entries, -identity]), np.zeros(weights.size))

    if opts.fixed_minimizer is not None:
        x_star = np.asarray(opts.fixed_minimizer, dtype=float)
        if x_star.size != n:
            raise ValueError(f"Fixed minimizer has dimension {x_star.size}, expected {n}")
        blocks = [layout.gradient_design(x_star) @ svec_map]
        if not opts.symmetric:
            blocks.append(np.eye(n))
        if regularized.size:
            builder.add_equalities(regularized, np.hstack(blocks), np.zeros(n))

    if opts.lower_bound is None:
        if reduced.size:
            builder.add_psd(np.zeros((reduced.n, reduced.n)), s_cols, reduced.basis())
    else:
        V_lb = opts.lower_bound
        if V_lb.n != n:
            raise ValueError(f"Lower bound has dimension {V_lb.n}, expected {n}")
        slack = builder.variables('slack', 1)
        constant = np.zeros((n + 1, n + 1))
        constant[:n, :n] = -V_lb.P
        constant[:n, n] = -V_lb.p
        constant[n, :n] = -V_lb.p
        lifted = np.zeros((layout.size, n + 1, n + 1))
        lifted[:, :n, :n] = layout.basis()
        coefficients = [lifted]
        if p_cols.size:
            linear = np.zeros((n, n + 1, n + 1))
            linear[np.arange(n), np.arange(n), n] = 1.0
            linear[np.arange(n), n, np.arange(n)] = 1.0
            coefficients.append(linear)
        corner = np.zeros((1, n + 1, n + 1))
        corner[0, n, n] = 1.0
        coefficients.append(corner)
        builder.add_psd(constant, np.concatenate([s_cols, p_cols, slack]), np.concatenate(coefficients))

    return _FitProgram(builder.build(), svec_map, s_cols, p_cols, c_cols)


def _solve_fit(fit, opts):
    program = fit.program
    if program.n_vars == 0:
        return ConicSolution(SolveStatus.OPTIMAL, np.zeros(0), np.zeros(program.eq_matrix.shape[0]),
                             program.objective_constant)
    solution = solve(program, opts.tolerances)
    if solution.status == SolveStatus.INFEASIBLE:
        raise FittingError("Fitting constraints are infeasible", status=solution.status)
    if not solution.usable:
        raise FittingError(f"Fitting solve failed with status {solution.status.value}", status=solution.status)
    if solution.status == SolveStatus.INACCURATE:
        logger.warning("Accepting inaccurate fitting solve")
    return solution


def _face(P, tolerances):
    """Eigenvectors of P with eigenvalues clearly above the solver's accuracy, or None if all are."""
    eigenvalues, eigenvectors = np.linalg.eigh(symmetrize(P))
    scale = max(1.0, float(np.max(np.abs(eigenvalues))) if eigenvalues.size else 1.0)
    threshold = FACE_FACTOR * math.sqrt(max(tolerances.abs_gap, tolerances.rel_gap)) * scale
    keep = eigenvalues > threshold
    if keep.all():
        return None
    return eigenvectors[:, keep]


def _polish(samples, opts, gradient, layout, fit, solution):
    """
    Re-solve with P restricted to the face of the PSD cone spanned by its
    clearly positive eigenvectors. Interior-point iterates approach zero
    eigenvalues only like the square root of the gap; on the face the optimum
    is interior. The polished fit is kept when its objective matches.
    """
    tolerances = opts.tolerances or DEFAULT_TOLERANCES
    P = layout.matrix(fit.svec_map @ solution.primal[fit.s_cols])
    face = _face(P, tolerances)
    if face is None:
        return fit, solution
    polished_fit = _build_fit(samples, opts, gradient, layout, face)
    try:
        polished = _solve_fit(polished_fit, opts)
    except FittingError as e:
        logger.debug(f"Keeping the unpolished fit: {str(e)}")
        return fit, solution
    slack = POLISH_SLACK * (tolerances.abs_gap + tolerances.rel_gap * max(1.0, abs(solution.objective)))
    if polished.objective > solution.objective + slack:
        logger.debug(f"Keeping the unpolished fit (objective {polished.objective:.6e} > {solution.objective:.6e})")
        return fit, solution
    logger.debug(f"Polished fit on a face of rank {face.shape[1]}")
    return polished_fit, polished


def _fit(samples, opts, gradient):
    n = _check_samples(samples, gradient)
    layout = _Layout(n)
    fit = _build_fit(samples, opts, gradient, layout)
    solution = _solve_fit(fit, opts)
    if opts.lower_bound is None:
        fit, solution = _polish(samples, opts, gradient, layout, fit, solution)

    z = solution.primal
    P = layout.matrix(fit.svec_map @ z[fit.s_cols])
    p = np.zeros(n) if opts.symmetric else z[fit.p_cols]
    if opts.lower_bound is None:
        if min_eigenvalue(P) < -PSD_TOL:
            logger.warning(f"Projecting fitted P onto the PSD cone (min eigenvalue {min_eigenvalue(P):.3e})")
        P = psd_project(P)
        pi = 0.0
    else:
        V_lb = opts.lower_bound
        excess = P - V_lb.P
        if min_eigenvalue(excess) < -PSD_TOL:
            logger.warning("Projecting fitted P - P_lb onto the PSD cone")
        excess = psd_project(excess)
        P = symmetrize(V_lb.P + excess)
        pi = V_lb.pi + 0.5 * _minimal_slack(excess, p - V_lb.p)

    if gradient:
        return QuadraticFunction(P, p, pi)
    return QuadraticFunction(P, p, float(z[fit.c_cols][0]))


def _minimal_slack(excess, shift):
    """Smallest s with [[excess, shift], [shift^T, s]] PSD, plus a small margin."""
    slack = float(shift @ np.linalg.pinv(excess, rcond=1e-10, hermitian=True) @ shift)
    return slack + 1e-9 * max(1.0, abs(slack))


def fit_value_gradient(samples, opts=None):
    """
    Fit V = 1/2 x^T P x + p^T x to sampled gradients.

    Minimizes (1/N) sum L(P x_i + p - g_i) + r(theta) over the constraint menu
    in `opts`.

    Args:
        samples: FitSamples with gradient targets
        opts: FitOptions, circular Huber with M = 1 by default

    Returns:
        QuadraticFunction; with a lower bound its offset pi makes V >= V_lb

    Raises:
        FittingError: infeasible constraint combination or failed solve
    """
    return _fit(list(samples), opts or FitOptions(), gradient=True)


def fit_values(samples, opts=None):
    """
    Fit V = 1/2 x^T P x + p^T x + c to sampled values; returns pi = c.
    """
    return _fit(list(samples), opts or FitOptions(), gradient=False)


def fit_loss(V, samples, opts=None):
    """Mean data loss of V on the samples (regularizers excluded)."""
    opts = opts or FitOptions()
    samples = list(samples)
    if not samples:
        return math.nan
    total = 0.0
    for sample in samples:
        if sample.is_gradient:
            residual = V.P @ sample.x + V.p - sample.target
        else:
            residual = 0.5 * sample.x @ V.P @ sample.x + V.p @ sample.x + V.pi - sample.target
        total += _loss(residual, opts)
    return total / len(samples)


def quadratic_dominates(V1, V2, tol=PSD_TOL):
    """
    True iff V1(x) >= V2(x) for all x, tested through the LMI
    [[P1 - P2, p1 - p2], [(p1 - p2)^T, 2 (pi1 - pi2)]] PSD.
    """
    if V1.n != V2.n:
        raise ValueError(f"Cannot compare quadratics of dimensions {V1.n} and {V2.n}")
    n = V1.n
    lmi = np.zeros((n + 1, n + 1))
    lmi[:n, :n] = V1.P - V2.P
    lmi[:n, n] = V1.p - V2.p
    lmi[n, :n] = V1.p - V2.p
    lmi[n, n] = 2.0 * (V1.pi - V2.pi)
    return min_eigenvalue(lmi) >= -tol


def damped_combine(V_half, V_prev, rho):
    """rho * V_half + (1 - rho) * V_prev, componentwise in (P, p, pi)."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"Damping must lie in (0, 1], got {rho}")
    if V_half.n != V_prev.n:
        raise ValueError(f"Cannot combine quadratics of dimensions {V_half.n} and {V_prev.n}")
    if rho == 1.0:
        return V_half
    return QuadraticFunction(
        rho * V_half.P + (1.0 - rho) * V_prev.P,
        rho * V_half.p + (1.0 - rho) * V_prev.p,
        rho * V_half.pi + (1.0 - rho) * V_prev.pi,
    )
