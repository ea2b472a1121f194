"""
Core immutable domain types: quadratic value functions, dynamics moments,
dynamics models, stage costs and control problems.
"""
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

PSD_TOL = 1e-8
FEASIBILITY_TOL = 1e-6


def _frozen(array):
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


def _matrix(value, rows, cols, name):
    if value is None:
        return _frozen(np.zeros((rows, cols)))
    array = np.asarray(value, dtype=float)
    if array.size == 0 and rows * cols == 0:
        array = array.reshape(rows, cols)
    if array.shape != (rows, cols):
        raise ValueError(f"{name} must have shape {(rows, cols)}, got {array.shape}")
    return _frozen(array)


def _vector(value, size, name):
    if value is None:
        return _frozen(np.zeros(size))
    array = np.asarray(value, dtype=float).reshape(-1)
    if array.shape != (size,):
        raise ValueError(f"{name} must have length {size}, got {array.shape[0]}")
    return _frozen(array)


def derive_seed(seed, *path):
    """
    Child SeedSequence of `seed` (int, None or SeedSequence) at `path`.

    Unlike SeedSequence.spawn this keeps no state, so the same path always
    yields the same stream.
    """
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(path))


def symmetrize(matrix):
    matrix = np.asarray(matrix, dtype=float)
    return 0.5 * (matrix + matrix.T)


def min_eigenvalue(matrix):
    matrix = symmetrize(matrix)
    if matrix.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(matrix)[0])


def is_psd(matrix, tol=PSD_TOL):
    return min_eigenvalue(matrix) >= -tol


def psd_project(matrix):
    """Clip the negative eigenvalues of a symmetric matrix to zero."""
    matrix = symmetrize(matrix)
    if matrix.size == 0:
        return matrix
    eigenvalues, eigenvectors = np.linalg.eigh(matrix)
    if eigenvalues[0] >= 0:
        return matrix
    eigenvalues = np.maximum(eigenvalues, 0.0)
    return symmetrize((eigenvectors * eigenvalues) @ eigenvectors.T)


@dataclass(frozen=True)
class QuadraticFunction:
    """
    Convex quadratic V(x) = 1/2 x^T P x + p^T x + pi.

    P is symmetrized on construction and must be positive semidefinite
    (minimum eigenvalue >= -1e-8).
    """
    P: np.ndarray
    p: np.ndarray
    pi: float = 0.0

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        n = P.shape[0]
        if P.shape != (n, n):
            raise ValueError(f"P must be square, got shape {P.shape}")
        P = symmetrize(P)
        if not np.all(np.isfinite(P)):
            raise ValueError("P has non-finite entries")
        if min_eigenvalue(P) < -PSD_TOL:
            raise ValueError(
                f"P is not positive semidefinite (min eigenvalue {min_eigenvalue(P):.3e})"
            )
        object.__setattr__(self, 'P', _frozen(P))
        object.__setattr__(self, 'p', _vector(self.p, n, 'p'))
        object.__setattr__(self, 'pi', float(self.pi))

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def parameter_count(self):
        """Number of free scalars in theta = (P, p)."""
        return self.n * (self.n + 1) // 2 + self.n

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, n)), np.zeros(n), 0.0)

    def with_offset(self, pi):
        return QuadraticFunction(self.P, self.p, pi)

    def to_dict(self):
        return {
            'n': self.n,
            'P': self.P.reshape(-1).tolist(),
            'p': self.p.tolist(),
            'pi': self.pi,
        }

    @classmethod
    def from_dict(cls, data):
        try:
            n = int(data['n'])
            P = np.asarray(data['P'], dtype=float).reshape(n, n)
            return cls(P, data['p'], data.get('pi', 0.0))
        except (KeyError, TypeError) as e:
            raise ValueError(f"Malformed value function: {e}") from e


def _check_state(V, x):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (V.n,):
        raise ValueError(f"State has dimension {x.shape[0]}, value function expects {V.n}")
    return x


def quad_eval(V, x):
    """Evaluate 1/2 x^T P x + p^T x + pi."""
    x = _check_state(V, x)
    return float(0.5 * x @ V.P @ x + V.p @ x + V.pi)


def quad_gradient(V, x):
    """Gradient P x + p."""
    x = _check_state(V, x)
    return V.P @ x + V.p


@dataclass(frozen=True)
class DynamicsMoments:
    """
    First and second moments of the stacked dynamics W = [A B c].

    Columns of W are indexed 0..n+m; column i < n is column i of A, columns
    n..n+m-1 are the columns of B and the last column is c. `second[i, j]` is
    the raw second moment E[w_i w_j^T], so that for any P
    E[W^T P W]_{ij} = sum_ab P_ab second[i, j, a, b]. Covariance blocks are
    reported through `column_covariance` and the named accessors.
    """
    mean: np.ndarray
    second: np.ndarray
    source: str = 'closed-form'

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        n, k = mean.shape
        if k < n + 1:
            raise ValueError(f"Stacked mean must have at least n+1 columns, got {mean.shape}")
        second = np.asarray(self.second, dtype=float)
        if second.shape != (k, k, n, n):
            raise ValueError(f"Second moments must have shape {(k, k, n, n)}, got {second.shape}")
        object.__setattr__(self, 'mean', _frozen(mean))
        object.__setattr__(self, 'second', _frozen(second))
        for i in range(k):
            cov = self.column_covariance(i, i)
            scale = max(1.0, float(np.max(np.abs(second[i, i]))))
            if min_eigenvalue(cov) < -PSD_TOL * scale:
                raise ValueError(f"Covariance of stacked column {i} is not positive semidefinite")

    @property
    def n(self):
        return self.mean.shape[0]

    @property
    def m(self):
        return self.mean.shape[1] - self.n - 1

    @property
    def Abar(self):
        return self.mean[:, :self.n]

    @property
    def Bbar(self):
        return self.mean[:, self.n:self.n + self.m]

    @property
    def cbar(self):
        return self.mean[:, -1]

    def column_covariance(self, i, j):
        return self.second[i, j] - np.outer(self.mean[:, i], self.mean[:, j])

    def sigma_A(self, i, j):
        return self.column_covariance(i, j)

    def sigma_B(self, i, j):
        return self.column_covariance(self.n + i, self.n + j)

    def sigma_AB(self, i, j):
        """Covariance between column i of A and column j of B."""
        return self.column_covariance(i, self.n + j)

    def sigma_Ac(self, i):
        return self.column_covariance(i, self.n + self.m)

    def sigma_Bc(self, i):
        return self.column_covariance(self.n + i, self.n + self.m)

    @property
    def sigma_c(self):
        return self.column_covariance(self.n + self.m, self.n + self.m)

    def expected_form(self, P):
        """E[W^T P W] as an (n+m+1) x (n+m+1) matrix."""
        P = np.asarray(P, dtype=float)
        return symmetrize(np.einsum('ab,ijab->ij', P, self.second))

    def EATPA(self, P):
        return self.expected_form(P)[:self.n, :self.n]

    def EBTPB(self, P):
        s = slice(self.n, self.n + self.m)
        return self.expected_form(P)[s, s]

    def EBTPA(self, P):
        return self.expected_form(P)[self.n:self.n + self.m, :self.n]

    def EATPc(self, P):
        return self.expected_form(P)[:self.n, -1]

    def EBTPc(self, P):
        return self.expected_form(P)[self.n:self.n + self.m, -1]

    def EcTPc(self, P):
        return float(self.expected_form(P)[-1, -1])

    @classmethod
    def from_mean_and_covariance(cls, mean, covariance, source='closed-form'):
        """
        Build from the stacked mean and a covariance tensor cov[i, j] of
        stacked columns (same layout as `second`).
        """
        mean = np.asarray(mean, dtype=float)
        second = np.asarray(covariance, dtype=float) + np.einsum('ai,bj->ijab', mean, mean)
        return cls(mean, second, source)

    @classmethod
    def deterministic(cls, A, B, c, c_cov=None):
        """Moments of constant A, B with c of mean `c` and covariance `c_cov`."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n = A.shape[0]
        B = np.asarray(B, dtype=float).reshape(n, -1)
        c = np.asarray(c, dtype=float).reshape(n)
        mean = np.hstack([A, B, c[:, None]])
        k = mean.shape[1]
        covariance = np.zeros((k, k, n, n))
        if c_cov is not None:
            covariance[-1, -1] = np.asarray(c_cov, dtype=float).reshape(n, n)
        return cls.from_mean_and_covariance(mean, covariance)

    def to_dict(self):
        return {
            'Abar': self.Abar.tolist(),
            'Bbar': self.Bbar.tolist(),
            'cbar': self.cbar.tolist(),
            'source': self.source,
        }


class DynamicsSampler:
    """
    Draws one IID (A, B, c) per call from a numpy Generator.

    Subclasses implement `draw`; `draw_batch` may be overridden with a
    vectorized version.
    """

    def draw(self, rng):
        raise NotImplementedError

    def draw_batch(self, rng, count):
        draws = [self.draw(rng) for _ in range(count)]
        return tuple(np.stack(parts) for parts in zip(*draws))


class DeterministicSampler(DynamicsSampler):

    def __init__(self, A, B, c):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        n = self.A.shape[0]
        self.B = np.asarray(B, dtype=float).reshape(n, -1)
        self.c = np.asarray(c, dtype=float).reshape(n)

    def draw(self, rng):
        return self.A.copy(), self.B.copy(), self.c.copy()

    def draw_batch(self, rng, count):
        return (np.broadcast_to(self.A, (count,) + self.A.shape).copy(),
                np.broadcast_to(self.B, (count,) + self.B.shape).copy(),
                np.broadcast_to(self.c, (count,) + self.c.shape).copy())


class AdditiveGaussianSampler(DeterministicSampler):
    """Constant A, B with c ~ N(c, cov)."""

    def __init__(self, A, B, c, cov):
        super().__init__(A, B, c)
        cov = np.asarray(cov, dtype=float).reshape(self.c.size, self.c.size)
        eigenvalues, eigenvectors = np.linalg.eigh(symmetrize(cov))
        self.factor = eigenvectors * np.sqrt(np.maximum(eigenvalues, 0.0))

    def draw(self, rng):
        noise = self.factor @ rng.standard_normal(self.c.size)
        return self.A.copy(), self.B.copy(), self.c + noise

    def draw_batch(self, rng, count):
        A, B, c = super().draw_batch(rng, count)
        return A, B, c + rng.standard_normal((count, self.c.size)) @ self.factor.T


@dataclass(frozen=True)
class DynamicsModel:
    """Random affine dynamics x+ = A x + B u + c with known moments."""
    moments: DynamicsMoments
    sampler: DynamicsSampler

    @property
    def n(self):
        return self.moments.n

    @property
    def m(self):
        return self.moments.m

    def draw(self, rng):
        return self.sampler.draw(rng)

    def sample(self, seed):
        """One draw from a fresh generator; identical seeds give identical draws."""
        return self.sampler.draw(np.random.default_rng(seed))

    @classmethod
    def deterministic(cls, A, B, c):
        return cls(DynamicsMoments.deterministic(A, B, c), DeterministicSampler(A, B, c))

    @classmethod
    def additive_gaussian(cls, A, B, c, cov):
        return cls(DynamicsMoments.deterministic(A, B, c, cov),
                   AdditiveGaussianSampler(A, B, c, cov))


@dataclass(frozen=True)
class StageCost:
    """
    Convex QP-representable stage cost

        g(x, u) = x^T Qxx x + u^T Quu u + 2 x^T Qxu u + qx^T x + qu^T u + q0
                  + sum_j max(0, pwl_rows[j] . (x, u) + pwl_offsets[j])

    plus the indicator of ineq_matrix (x, u) <= ineq_rhs and
    eq_matrix (x, u) = eq_rhs.

    `exogenous` lists state coordinates that are redrawn every step independently
    of the input; cross terms Qxu in those rows need not be jointly convex.
    """
    n: int
    m: int
    Qxx: np.ndarray = None
    Quu: np.ndarray = None
    Qxu: np.ndarray = None
    qx: np.ndarray = None
    qu: np.ndarray = None
    q0: float = 0.0
    pwl_rows: np.ndarray = None
    pwl_offsets: np.ndarray = None
    ineq_matrix: np.ndarray = None
    ineq_rhs: np.ndarray = None
    eq_matrix: np.ndarray = None
    eq_rhs: np.ndarray = None
    exogenous: tuple = ()

    def __post_init__(self):
        n, m = int(self.n), int(self.m)
        if n < 1 or m < 0:
            raise ValueError(f"Invalid dimensions n={n}, m={m}")
        object.__setattr__(self, 'n', n)
        object.__setattr__(self, 'm', m)
        object.__setattr__(self, 'Qxx', _frozen(symmetrize(_matrix(self.Qxx, n, n, 'Qxx'))))
        object.__setattr__(self, 'Quu', _frozen(symmetrize(_matrix(self.Quu, m, m, 'Quu'))))
        object.__setattr__(self, 'Qxu', _matrix(self.Qxu, n, m, 'Qxu'))
        object.__setattr__(self, 'qx', _vector(self.qx, n, 'qx'))
        object.__setattr__(self, 'qu', _vector(self.qu, m, 'qu'))
        object.__setattr__(self, 'q0', float(self.q0))
        for rows_name, rhs_name in (('pwl_rows', 'pwl_offsets'),
                                    ('ineq_matrix', 'ineq_rhs'),
                                    ('eq_matrix', 'eq_rhs')):
            rows = getattr(self, rows_name)
            count = 0 if rows is None else np.asarray(rows).reshape(-1, n + m).shape[0]
            rows = None if rows is None else np.asarray(rows, dtype=float).reshape(count, n + m)
            object.__setattr__(self, rows_name, _matrix(rows, count, n + m, rows_name))
            object.__setattr__(self, rhs_name, _vector(getattr(self, rhs_name), count, rhs_name))
        exogenous = tuple(sorted(int(i) for i in self.exogenous))
        if any(i < 0 or i >= n for i in exogenous):
            raise ValueError(f"Exogenous indices {exogenous} out of range for n={n}")
        object.__setattr__(self, 'exogenous', exogenous)

        joint = self.joint_quadratic(include_exogenous=False)
        scale = max(1.0, float(np.max(np.abs(joint))) if joint.size else 1.0)
        if min_eigenvalue(joint) < -PSD_TOL * scale:
            raise ValueError("Quadratic part of the stage cost is not jointly convex")

    @property
    def endogenous_cross(self):
        """Qxu with exogenous rows zeroed."""
        cross = np.array(self.Qxu)
        cross[list(self.exogenous), :] = 0.0
        return cross

    @property
    def exogenous_cross(self):
        return self.Qxu - self.endogenous_cross

    def joint_quadratic(self, include_exogenous=True):
        cross = self.Qxu if include_exogenous else self.endogenous_cross
        return np.block([[self.Qxx, cross], [cross.T, self.Quu]])

    @property
    def has_constraints(self):
        return self.ineq_matrix.shape[0] > 0 or self.eq_matrix.shape[0] > 0

    @property
    def is_quadratic(self):
        """True when there are no piecewise-linear terms and no constraints."""
        return self.pwl_rows.shape[0] == 0 and not self.has_constraints

    def freeze_exogenous(self, values):
        """
        Replace exogenous cross terms by the linear input term obtained with
        the exogenous coordinates fixed at `values` (length n, only the
        exogenous entries are read). The result has no exogenous coordinates.
        """
        if not self.exogenous:
            return self
        values = np.asarray(values, dtype=float).reshape(self.n)
        frozen_values = np.zeros(self.n)
        frozen_values[list(self.exogenous)] = values[list(self.exogenous)]
        qu = self.qu + 2.0 * self.exogenous_cross.T @ frozen_values
        return replace(self, Qxu=self.endogenous_cross, qu=qu, exogenous=())

    def to_dict(self):
        return {
            'n': self.n,
            'm': self.m,
            'Qxx': self.Qxx.tolist(),
            'Quu': self.Quu.tolist(),
            'Qxu': self.Qxu.tolist(),
            'qx': self.qx.tolist(),
            'qu': self.qu.tolist(),
            'q0': self.q0,
            'pwl_rows': self.pwl_rows.tolist(),
            'pwl_offsets': self.pwl_offsets.tolist(),
            'ineq_matrix': self.ineq_matrix.tolist(),
            'ineq_rhs': self.ineq_rhs.tolist(),
            'eq_matrix': self.eq_matrix.tolist(),
            'eq_rhs': self.eq_rhs.tolist(),
            'exogenous': list(self.exogenous),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**{key: data[key] for key in data})


def stage_cost_eval(g, x, u, tol=FEASIBILITY_TOL):
    """
    Evaluate g(x, u); returns math.inf when a constraint is violated by more
    than `tol`.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.shape != (g.n,) or u.shape != (g.m,):
        raise ValueError(
            f"Stage cost expects x in R^{g.n} and u in R^{g.m}, got {x.shape[0]} and {u.shape[0]}"
        )
    z = np.concatenate([x, u])
    if g.ineq_matrix.shape[0] and np.any(g.ineq_matrix @ z - g.ineq_rhs > tol):
        return math.inf
    if g.eq_matrix.shape[0] and np.any(np.abs(g.eq_matrix @ z - g.eq_rhs) > tol):
        return math.inf
    value = (x @ g.Qxx @ x + u @ g.Quu @ u + 2.0 * x @ g.Qxu @ u
             + g.qx @ x + g.qu @ u + g.q0)
    if g.pwl_rows.shape[0]:
        value += float(np.sum(np.maximum(0.0, g.pwl_rows @ z + g.pwl_offsets)))
    return float(value)


class InitialStateDistribution:

    def sample(self, rng):
        raise NotImplementedError


class GaussianState(InitialStateDistribution):

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float).reshape(-1)
        eigenvalues, eigenvectors = np.linalg.eigh(symmetrize(cov))
        self.factor = eigenvectors * np.sqrt(np.maximum(eigenvalues, 0.0))

    def sample(self, rng):
        return self.mean + self.factor @ rng.standard_normal(self.mean.size)


class UniformBoxState(InitialStateDistribution):

    def __init__(self, low, high):
        self.low = np.asarray(low, dtype=float).reshape(-1)
        self.high = np.asarray(high, dtype=float).reshape(-1)

    def sample(self, rng):
        return rng.uniform(self.low, self.high)


class FixedState(InitialStateDistribution):

    def __init__(self, x):
        self.x = np.asarray(x, dtype=float).reshape(-1)

    def sample(self, rng):
        return self.x.copy()


@dataclass(frozen=True)
class ControlProblem:
    """
    Convex stochastic control problem.

    gamma = 1 selects the average-cost Bellman operator, gamma < 1 the
    discounted one. `name`, `seed` and `params` record how a generator built
    the problem so it can be serialized and rebuilt.
    """
    n: int
    m: int
    dynamics: DynamicsModel
    cost: StageCost
    gamma: float = 1.0
    initial_state: InitialStateDistribution = None
    name: str = 'custom'
    seed: int = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dynamics.n != self.n or self.dynamics.m != self.m:
            raise ValueError(
                f"Dynamics dimensions ({self.dynamics.n}, {self.dynamics.m}) do not match "
                f"problem dimensions ({self.n}, {self.m})"
            )
        if self.cost.n != self.n or self.cost.m != self.m:
            raise ValueError("Stage cost dimensions do not match the problem")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        exogenous = list(self.cost.exogenous)
        if exogenous:
            moments = self.dynamics.moments
            if np.any(np.abs(moments.Abar[exogenous]) > 1e-12) or \
                    np.any(np.abs(moments.Bbar[exogenous]) > 1e-12):
                raise ValueError("Exogenous state coordinates must have zero rows in Abar and Bbar")
        if self.initial_state is None:
            object.__setattr__(self, 'initial_state', GaussianState(np.zeros(self.n), np.eye(self.n)))

    @property
    def discounted(self):
        return self.gamma < 1.0

    @property
    def exogenous_values(self):
        """Certainty-equivalent values of the exogenous coordinates (c-bar)."""
        return np.array(self.dynamics.moments.cbar)
