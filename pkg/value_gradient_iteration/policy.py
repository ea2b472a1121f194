"""
QADP policy evaluation, the Bellman operator with dual-based gradients,
closed-loop simulation and average-cost estimation.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .conic import ProgramBuilder, SolveStatus, solve
from .exceptions import InfeasibleError, SolverError
from .model import derive_seed, stage_cost_eval
from .moments import expected_joint

logger = logging.getLogger(__name__)

DEFAULT_BATCHES = 20


@dataclass(frozen=True)
class PolicyEvalResult:
    """
    Outcome of one QADP policy evaluation at a state.

    `objective` is (T V)(x) and `gradient` its (sub)gradient in x. Both are
    meaningful only when `status` is optimal or inaccurate.
    """
    u_star: np.ndarray
    objective: float
    gradient: np.ndarray
    status: SolveStatus

    @property
    def feasible(self):
        return self.status in (SolveStatus.OPTIMAL, SolveStatus.INACCURATE)


def add_stage_cost(builder, cost, x_cols, u_cols, scale=1.0, state=None):
    """
    Add scale * g(z, v) over variable blocks (x_cols, u_cols) to a program.

    Exogenous cross terms of `cost` are bilinear in the state and the input;
    they are added as a linear term in the input using the fixed `state`.
    Piecewise-linear terms get epigraph variables.
    """
    xu = np.concatenate([x_cols, u_cols])
    builder.add_quadratic(xu, 2.0 * scale * cost.joint_quadratic(include_exogenous=False))
    qu = cost.qu
    if cost.exogenous:
        if state is None:
            raise ValueError("Stage cost with exogenous coordinates needs a fixed state")
        qu = qu + 2.0 * cost.exogenous_cross.T @ np.asarray(state, dtype=float)
    builder.add_linear(xu, scale * np.concatenate([cost.qx, qu]))
    builder.add_constant(scale * cost.q0)
    builder.add_equalities(xu, cost.eq_matrix, cost.eq_rhs)
    builder.add_inequalities(xu, cost.ineq_matrix, cost.ineq_rhs)

    pieces = cost.pwl_rows.shape[0]
    if pieces:
        w = builder.variables(f'pwl{len(builder.blocks)}', pieces)
        builder.add_linear(w, scale * np.ones(pieces))
        builder.add_inequalities(w, -np.eye(pieces), np.zeros(pieces))
        builder.add_inequalities(np.concatenate([xu, w]),
                                 np.hstack([cost.pwl_rows, -np.eye(pieces)]),
                                 -cost.pwl_offsets)


def _policy_program(prob, V, x):
    n, m = prob.n, prob.m
    K = expected_joint(V, prob.dynamics.moments)
    builder = ProgramBuilder()
    x_cols = builder.variables('x', n)
    u_cols = builder.variables('u', m)
    # State pin first: its duals are the leading equality duals.
    builder.add_equalities(x_cols, np.eye(n), x)
    add_stage_cost(builder, prob.cost, x_cols, u_cols, state=x)
    xu = np.concatenate([x_cols, u_cols])
    builder.add_quadratic(xu, prob.gamma * K[:-1, :-1])
    builder.add_linear(xu, prob.gamma * K[:-1, -1])
    builder.add_constant(0.5 * prob.gamma * K[-1, -1])
    return builder.build(), u_cols


def qadp_evaluate(prob, V, x, tolerances=None):
    """
    Evaluate the QADP policy for V at state x.

    Solves minimize_u g(x, u) + gamma E V(A x + B u + c) with the state pinned
    by an auxiliary variable, so that the negated equality dual of the pin is
    the gradient of (T V) at x.

    Args:
        prob: ControlProblem
        V: QuadraticFunction
        x: State
        tolerances: Optional SolverTolerances

    Returns:
        PolicyEvalResult; an infeasible state yields status infeasible
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (prob.n,):
        raise ValueError(f"State has dimension {x.shape[0]}, problem expects {prob.n}")
    program, u_cols = _policy_program(prob, V, x)
    solution = solve(program, tolerances)
    m = prob.m

    if solution.status in (SolveStatus.INFEASIBLE, SolveStatus.UNBOUNDED):
        objective = math.inf if solution.status == SolveStatus.INFEASIBLE else -math.inf
        return PolicyEvalResult(np.full(m, np.nan), objective, np.full(prob.n, np.nan), solution.status)
    if not solution.usable:
        return PolicyEvalResult(np.full(m, np.nan), math.nan, np.full(prob.n, np.nan),
                                SolveStatus.INACCURATE)
    if solution.status == SolveStatus.INACCURATE:
        logger.warning(f"Accepting inaccurate policy solve at state {x}")

    u_star = solution.primal[u_cols]
    gradient = -solution.eq_duals[:prob.n] + 2.0 * prob.cost.exogenous_cross @ u_star
    return PolicyEvalResult(u_star, solution.objective, gradient, solution.status)


def bellman_apply(prob, V, x, tolerances=None):
    """
    Value and (sub)gradient of (T V) at x.

    Raises:
        InfeasibleError: no input satisfies the constraints at x
        SolverError: the solve produced no usable solution
    """
    result = qadp_evaluate(prob, V, x, tolerances)
    _raise_for_status(result, x)
    return result.objective, result.gradient


def _raise_for_status(result, x):
    if result.status == SolveStatus.INFEASIBLE:
        raise InfeasibleError(f"No feasible input at state {np.round(x, 6).tolist()}", state=np.array(x))
    if result.status == SolveStatus.UNBOUNDED:
        raise SolverError("Policy problem is unbounded; the expected cost is not bounded below in u",
                          status=result.status)
    if not result.feasible:
        raise SolverError(f"Policy solve failed at state {np.round(x, 6).tolist()}", status=result.status)


class QadpPolicy:
    """
    State feedback x -> argmin_u g(x, u) + gamma E V(A x + B u + c).
    """

    def __init__(self, prob, V, tolerances=None):
        if V.n != prob.n:
            raise ValueError(f"Value function has dimension {V.n}, problem has {prob.n}")
        self.prob = prob
        self.V = V
        self.tolerances = tolerances

    def evaluate(self, x):
        """Full evaluation result; raises when the state admits no input."""
        result = qadp_evaluate(self.prob, self.V, x, self.tolerances)
        _raise_for_status(result, x)
        return result

    def __call__(self, x):
        return self.evaluate(x).u_star


@dataclass
class Trajectory:
    """
    Closed-loop rollout. Row t of `states`/`inputs` is (x_t, u_t) and
    `costs[t]` is g(x_t, u_t); `final_state` is x_T.
    """
    states: np.ndarray
    inputs: np.ndarray
    costs: np.ndarray
    final_state: np.ndarray
    evaluations: list = field(default_factory=list)

    @property
    def steps(self):
        return self.costs.shape[0]

    def to_frame(self):
        frame = pd.DataFrame({'t': np.arange(self.steps)})
        for i in range(self.states.shape[1]):
            frame[f'x_{i}'] = self.states[:, i]
        for i in range(self.inputs.shape[1]):
            frame[f'u_{i}'] = self.inputs[:, i]
        frame['stage_cost'] = self.costs
        return frame


def simulate(prob, policy, x0, steps, seed=None):
    """
    Run the closed loop x+ = A x + B u + c for `steps` steps.

    Args:
        prob: ControlProblem
        policy: Callable mapping a state to an input, or to a PolicyEvalResult
            (those results are kept in `Trajectory.evaluations`)
        x0: Initial state
        steps: Number of steps T
        seed: Seed (int or numpy SeedSequence) for the dynamics draws

    Returns:
        Trajectory

    Raises:
        InfeasibleError: a state admits no input or the input violates the
            stage-cost constraints; the offending state is attached
    """
    x = np.asarray(x0, dtype=float).reshape(-1)
    if x.shape != (prob.n,) or not np.all(np.isfinite(x)):
        raise ValueError(f"Initial state must be a finite vector of length {prob.n}")
    if steps < 0:
        raise ValueError(f"steps must be nonnegative, got {steps}")

    rng = np.random.default_rng(seed)
    A, B, c = prob.dynamics.sampler.draw_batch(rng, steps)
    states = np.zeros((steps, prob.n))
    inputs = np.zeros((steps, prob.m))
    costs = np.zeros(steps)
    evaluations = []

    for t in range(steps):
        decision = policy(x)
        if isinstance(decision, PolicyEvalResult):
            evaluations.append(decision)
            decision = decision.u_star
        u = np.asarray(decision, dtype=float).reshape(prob.m)
        cost = stage_cost_eval(prob.cost, x, u)
        if math.isinf(cost):
            raise InfeasibleError(f"Input violates the constraints at step {t}", state=x.copy())
        states[t] = x
        inputs[t] = u
        costs[t] = cost
        x = A[t] @ x + B[t] @ u + c[t]

    return Trajectory(states, inputs, costs, x, evaluations)


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    steps: int
    burn_in: int
    batches: int
    trajectory: Trajectory = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {
            'avg_cost': self.mean,
            'avg_cost_stderr': self.stderr,
            'steps': self.steps,
            'burn_in': self.burn_in,
            'batches': self.batches,
        }


def batch_means(costs, batches=DEFAULT_BATCHES):
    """Mean and batch-means standard error of a cost sequence."""
    costs = np.asarray(costs, dtype=float)
    batches = max(1, min(batches, costs.size))
    mean = float(costs.mean())
    if batches < 2:
        return mean, 0.0, batches
    means = np.array([chunk.mean() for chunk in np.array_split(costs, batches)])
    return mean, float(means.std(ddof=1) / np.sqrt(batches)), batches


def average_cost(prob, policy, steps, burn_in=None, seed=None, x0=None):
    """
    Estimate the average stage cost of a policy from one long simulation.

    Args:
        prob: ControlProblem
        policy: State feedback callable
        steps: Simulation length
        burn_in: Steps discarded at the start, 10% of `steps` by default
        seed: Seed for the initial state and the dynamics draws
        x0: Optional initial state, drawn from prob.initial_state otherwise

    Returns:
        CostEstimate with a 20-batch-means standard error
    """
    if burn_in is None:
        burn_in = steps // 10
    if steps <= burn_in or burn_in < 0:
        raise ValueError(f"steps ({steps}) must exceed burn_in ({burn_in})")
    if x0 is None:
        x0 = prob.initial_state.sample(np.random.default_rng(derive_seed(seed, 0)))
    trajectory = simulate(prob, policy, x0, steps, derive_seed(seed, 1))
    mean, stderr, batches = batch_means(trajectory.costs[burn_in:])
    return CostEstimate(mean, stderr, steps, burn_in, batches, trajectory)
