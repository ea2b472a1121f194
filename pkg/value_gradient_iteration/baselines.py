"""
Certainty-equivalent baselines: steady-state optimal pair, CE-MPC,
LQR value iteration and the certainty-equivalent LQR lower bound.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np

from .conic import ProgramBuilder, SolveStatus, solve
from .exceptions import DivergenceError, InfeasibleError, SolverError
from .model import QuadraticFunction, min_eigenvalue, psd_project, symmetrize
from .policy import add_stage_cost

logger = logging.getLogger(__name__)

DIVERGENCE_BOUND = 1e8


def _raise_for_plan(solution, what, state=None):
    if solution.status == SolveStatus.INFEASIBLE:
        raise InfeasibleError(f"{what} is infeasible", state=state)
    if solution.status == SolveStatus.UNBOUNDED:
        raise SolverError(f"{what} is unbounded", status=solution.status)
    if not solution.usable:
        raise SolverError(f"{what} failed with status {solution.status.value}", status=solution.status)
    if solution.status == SolveStatus.INACCURATE:
        logger.warning(f"Accepting inaccurate solution of the {what.lower()}")


def ce_sso(prob, cost=None):
    """
    Certainty-equivalent steady-state optimal pair.

    Minimizes g(z, v) subject to z = Abar z + Bbar v + cbar.

    Args:
        prob: ControlProblem
        cost: Optional replacement stage cost (e.g. with an input term removed)

    Returns:
        Tuple (x_sso, u_sso)
    """
    moments = prob.dynamics.moments
    cost = (cost or prob.cost).freeze_exogenous(moments.cbar)
    n, m = prob.n, prob.m
    builder = ProgramBuilder()
    z = builder.variables('z', n)
    v = builder.variables('v', m)
    add_stage_cost(builder, cost, z, v)
    builder.add_equalities(np.concatenate([z, v]),
                           np.hstack([np.eye(n) - moments.Abar, -moments.Bbar]), moments.cbar)
    solution = solve(builder.build())
    _raise_for_plan(solution, "Steady-state problem")
    return solution.primal[z], solution.primal[v]


class CeMpcPolicy:
    """
    Certainty-equivalent MPC over `horizon` steps with an optional terminal cost.

    Without a terminal cost the stage costs are summed unscaled. With
    `literal_scaling` the stage sum is weighted by 1/(H+1) while the terminal
    cost keeps weight one.
    """

    def __init__(self, prob, horizon, terminal=None, literal_scaling=False, tolerances=None):
        if horizon < 1:
            raise ValueError(f"Horizon must be at least 1, got {horizon}")
        if terminal is not None and terminal.n != prob.n:
            raise ValueError(f"Terminal cost has dimension {terminal.n}, problem has {prob.n}")
        self.prob = prob
        self.horizon = int(horizon)
        self.terminal = terminal
        self.literal_scaling = literal_scaling
        self.tolerances = tolerances
        self._frozen_cost = prob.cost.freeze_exogenous(prob.dynamics.moments.cbar)

    def plan(self, x):
        """
        Solve the planning problem from x.

        Returns:
            Tuple (states (H+1) x n, inputs H x m)
        """
        prob = self.prob
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape != (prob.n,):
            raise ValueError(f"State has dimension {x.shape[0]}, problem expects {prob.n}")
        moments = prob.dynamics.moments
        n, m, H = prob.n, prob.m, self.horizon
        scale = 1.0 / (H + 1) if self.literal_scaling else 1.0

        builder = ProgramBuilder()
        states = [builder.variables(f'z{t}', n) for t in range(H + 1)]
        inputs = [builder.variables(f'v{t}', m) for t in range(H)]
        builder.add_equalities(states[0], np.eye(n), x)
        dynamics = np.hstack([moments.Abar, moments.Bbar, -np.eye(n)])
        for t in range(H):
            builder.add_equalities(np.concatenate([states[t], inputs[t], states[t + 1]]),
                                   dynamics, -moments.cbar)
            if t == 0:
                add_stage_cost(builder, prob.cost, states[0], inputs[0], scale, state=x)
            else:
                add_stage_cost(builder, self._frozen_cost, states[t], inputs[t], scale)
        if self.terminal is not None:
            builder.add_quadratic(states[H], self.terminal.P)
            builder.add_linear(states[H], self.terminal.p)
            builder.add_constant(self.terminal.pi)

        solution = solve(builder.build(), self.tolerances)
        _raise_for_plan(solution, "MPC plan", state=x)
        z = solution.primal
        return np.array([z[s] for s in states]), np.array([z[v] for v in inputs]).reshape(H, m)

    def __call__(self, x):
        return self.plan(x)[1][0]


def ce_mpc_evaluate(prob, horizon, V_terminal, x, literal_scaling=False):
    """First input of the H-step certainty-equivalent plan from x."""
    return CeMpcPolicy(prob, horizon, V_terminal, literal_scaling)(x)


def _bellman_image(Abar, Bbar, cbar, cost, gamma, V):
    """Quadratic coefficients (H, h) of g(x, u) + gamma V(A x + B u + c)."""
    AB = np.hstack([Abar, Bbar])
    H = 2.0 * cost.joint_quadratic() + gamma * AB.T @ V.P @ AB
    h = np.concatenate([cost.qx, cost.qu]) + gamma * AB.T @ (V.P @ cbar + V.p)
    return symmetrize(H), h


def lqr_step(Abar, Bbar, cbar, cost, gamma, V):
    """
    One certainty-equivalent Bellman step on a quadratic, constants dropped.

    Returns:
        Tuple (QuadraticFunction, feedback gain K, offset k) with u = K x + k
    """
    Abar = np.asarray(Abar, dtype=float)
    Bbar = np.asarray(Bbar, dtype=float)
    cbar = np.asarray(cbar, dtype=float)
    n = Abar.shape[0]
    H, h = _bellman_image(Abar, Bbar, cbar, cost, gamma, V)
    Hxx, Hxu, Huu = H[:n, :n], H[:n, n:], H[n:, n:]
    scale = max(1.0, float(np.max(np.abs(Huu))) if Huu.size else 1.0)
    if Huu.size and min_eigenvalue(Huu) <= 1e-12 * scale:
        raise SolverError("Bellman image is not positive definite in the input")
    gain = -np.linalg.solve(Huu, Hxu.T) if Huu.size else np.zeros((0, n))
    offset = -np.linalg.solve(Huu, h[n:]) if Huu.size else np.zeros(0)
    P = psd_project(Hxx + Hxu @ gain)
    p = h[:n] + Hxu @ offset
    return QuadraticFunction(P, p), gain, offset


def lqr_value_iteration(Abar, Bbar, cbar, cost, gamma=1.0, iters=10000, tol=1e-10, initial=None):
    """
    Value iteration for an unconstrained quadratic stage cost under mean dynamics.

    Each step is the closed-form partial minimization over u; the constant is
    dropped every step, so for gamma = 1 this is relative value iteration.

    Args:
        Abar, Bbar, cbar: Certainty-equivalent dynamics
        cost: StageCost without constraints or piecewise-linear terms
        gamma: Discount factor in (0, 1]
        iters: Iteration limit
        tol: Stop when ||P+ - P||_F and ||p+ - p|| are both below tol
        initial: Starting QuadraticFunction, zero by default

    Returns:
        QuadraticFunction with pi = 0

    Raises:
        DivergenceError: ||P|| exceeded 1e8
        SolverError: a step met a Bellman image that is singular in the input
    """
    Abar = np.atleast_2d(np.asarray(Abar, dtype=float))
    n = Abar.shape[0]
    Bbar = np.asarray(Bbar, dtype=float).reshape(n, -1)
    cbar = np.asarray(cbar, dtype=float).reshape(n)
    if not cost.is_quadratic:
        raise ValueError("LQR value iteration needs a purely quadratic stage cost")
    if cost.exogenous:
        cost = cost.freeze_exogenous(cbar)
    V = initial or QuadraticFunction.zeros(n)

    for k in range(1, iters + 1):
        V_next, _, _ = lqr_step(Abar, Bbar, cbar, cost, gamma, V)
        if np.linalg.norm(V_next.P) > DIVERGENCE_BOUND:
            raise DivergenceError(f"LQR value iteration diverged after {k} iterations")
        dP = np.linalg.norm(V_next.P - V.P)
        dp = np.linalg.norm(V_next.p - V.p)
        V = V_next
        if dP <= tol and dp <= tol:
            logger.debug(f"LQR value iteration converged after {k} iterations")
            return V
    logger.warning(f"LQR value iteration stopped after {iters} iterations without reaching tol={tol}")
    return V


@dataclass(frozen=True)
class RelaxationSpec:
    """
    How a problem is relaxed into an unconstrained certainty-equivalent LQR.

    Args:
        drop_constraints: Remove all polyhedral constraints
        drop_piecewise_linear: Remove piecewise-linear terms (they are nonnegative)
        input_penalty_quadratic: Weight a of the added penalty a u^T u
        input_penalty_linear: Coefficients b of the added penalty b^T u
            (scalar or m-vector)
    """
    drop_constraints: bool = True
    drop_piecewise_linear: bool = True
    input_penalty_quadratic: float = 0.0
    input_penalty_linear: object = 0.0

    def penalty(self, m):
        linear = np.broadcast_to(np.asarray(self.input_penalty_linear, dtype=float), (m,))
        return self.input_penalty_quadratic * np.eye(m), np.array(linear)

    def relax(self, cost):
        """Return the relaxed StageCost."""
        empty = np.zeros((0, cost.n + cost.m))
        changes = {}
        if self.drop_constraints:
            changes.update(ineq_matrix=empty, ineq_rhs=np.zeros(0), eq_matrix=empty, eq_rhs=np.zeros(0))
        if self.drop_piecewise_linear:
            changes.update(pwl_rows=empty, pwl_offsets=np.zeros(0))
        quadratic, linear = self.penalty(cost.m)
        changes.update(Quu=cost.Quu + quadratic, qu=cost.qu + linear)
        return replace(cost, **changes)

    def to_dict(self):
        return {
            'drop_constraints': self.drop_constraints,
            'drop_piecewise_linear': self.drop_piecewise_linear,
            'input_penalty_quadratic': self.input_penalty_quadratic,
            'input_penalty_linear': np.asarray(self.input_penalty_linear, dtype=float).tolist(),
        }


def ce_lqr_lower_bound(prob, relaxation=None):
    """
    Quadratic lower bound on the value function (up to a constant) from the
    certainty-equivalent LQR of a relaxed problem.

    Args:
        prob: ControlProblem
        relaxation: RelaxationSpec, dropping all constraints by default

    Returns:
        QuadraticFunction V_lb
    """
    relaxation = relaxation or RelaxationSpec()
    moments = prob.dynamics.moments
    relaxed = relaxation.relax(prob.cost.freeze_exogenous(moments.cbar))
    if not relaxed.is_quadratic:
        raise ValueError("Relaxation leaves constraints or piecewise-linear terms in the stage cost")
    if relaxed.m and min_eigenvalue(relaxed.Quu) <= 0:
        raise SolverError("Relaxed stage cost is not positive definite in the input")
    return lqr_value_iteration(moments.Abar, moments.Bbar, moments.cbar, relaxed, prob.gamma)
