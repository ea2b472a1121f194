"""
Outer loops of value-gradient iteration (VGI) and fitted value iteration (FVI).

Each iteration simulates K trajectories of length T under the current QADP
policy, keeps the N = K T Bellman evaluations made along the way, fits a
quadratic to their gradients (VGI) or values (FVI) and damps the result with
the previous iterate.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .exceptions import IterationAborted, VgiError
from .fitting import FitOptions, FitSample, damped_combine, fit_loss, fit_value_gradient, fit_values
from .model import QuadraticFunction, derive_seed
from .policy import QadpPolicy, average_cost, simulate

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ['iteration', 'policy_evals', 'avg_cost', 'avg_cost_stderr', 'fit_residual']

# Seed streams derived from IterationConfig.seed
ROLLOUT_STREAM = 0
EVALUATION_STREAM = 1


@dataclass(frozen=True)
class IterationConfig:
    """
    Settings of the VGI/FVI outer loop.

    Args:
        iterations: Number of outer iterations
        trajectories: Rollouts K per iteration
        horizon: Steps T per rollout; N = K T samples per iteration
        rho: Damping coefficient in (0, 1]
        fit: FitOptions for the fitting step
        seed: Root seed of all derived streams
        eval_steps: Simulation length of the per-iteration cost estimate (0 skips it)
        eval_burn_in: Discarded steps of that simulation, 10% by default
        workers: Processes used for rollouts
    """
    iterations: int = 20
    trajectories: int = 1
    horizon: int = 50
    rho: float = 0.5
    fit: FitOptions = field(default_factory=FitOptions)
    seed: int = 0
    eval_steps: int = 10000
    eval_burn_in: int = None
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be nonnegative, got {self.iterations}")
        if self.trajectories < 1 or self.horizon < 1:
            raise ValueError("trajectories and horizon must be at least 1")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if self.eval_steps < 0:
            raise ValueError(f"eval_steps must be nonnegative, got {self.eval_steps}")
        if self.workers < 1:
            raise ValueError(f"workers must be at least 1, got {self.workers}")

    @property
    def samples_per_iter(self):
        return self.trajectories * self.horizon

    def to_dict(self):
        return {
            'iterations': self.iterations,
            'trajectories': self.trajectories,
            'horizon': self.horizon,
            'samples_per_iter': self.samples_per_iter,
            'rho': self.rho,
            'fit': self.fit.to_dict(),
            'seed': self.seed,
            'eval_steps': self.eval_steps,
            'eval_burn_in': self.eval_burn_in,
            'workers': self.workers,
        }


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    policy_evals: int
    avg_cost: float
    avg_cost_stderr: float
    fit_residual: float
    value_function: QuadraticFunction


@dataclass
class IterationHistory:
    records: list = field(default_factory=list)

    def append(self, record):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    @property
    def final(self):
        return self.records[-1] if self.records else None

    def to_frame(self):
        rows = [{column: getattr(record, column) for column in HISTORY_COLUMNS}
                for record in self.records]
        return pd.DataFrame(rows, columns=HISTORY_COLUMNS)

    def to_csv(self, path, header=None):
        """
        Write the history table; `header` lines are prepended as '#' comments.
        """
        with open(path, 'w', newline='') as f:
            for line in header or []:
                f.write(f"# {line}\n")
            self.to_frame().to_csv(f, index=False, float_format='%.10g')


def trajectory_seeds(seed, count):
    """Independent per-trajectory SeedSequences derived from `seed`."""
    return [derive_seed(seed, j) for j in range(count)]


def _rollout(prob, V, x0, steps, seed, record):
    policy = QadpPolicy(prob, V)
    return simulate(prob, policy.evaluate if record else policy, x0, steps, seed)


def _collect(prob, V, trajectories, horizon, carry_state, seed, workers=1, record=True):
    seeds = trajectory_seeds(seed, trajectories)
    if carry_state is None:
        starts = [prob.initial_state.sample(np.random.default_rng(derive_seed(s, 0))) for s in seeds]
    else:
        starts = [np.asarray(x, dtype=float) for x in carry_state]
        if len(starts) != trajectories:
            raise ValueError(f"Expected {trajectories} carried states, got {len(starts)}")
    dynamics_seeds = [derive_seed(s, 1) for s in seeds]
    args = ([prob] * trajectories, [V] * trajectories, starts, [horizon] * trajectories,
            dynamics_seeds, [record] * trajectories)
    if workers > 1 and trajectories > 1:
        with ProcessPoolExecutor(max_workers=min(workers, trajectories)) as executor:
            return list(executor.map(_rollout, *args))
    return list(map(_rollout, *args))


def collect_samples(prob, V, trajectories, horizon, carry_state=None, seed=None, workers=1):
    """
    Visit N = K T states by simulating the QADP policy for V.

    Args:
        prob: ControlProblem
        V: QuadraticFunction defining the policy
        trajectories: Number of rollouts K
        horizon: Steps T per rollout
        carry_state: K starting states, drawn from prob.initial_state when None
        seed: Root seed; rollout j uses a derived stream
        workers: Processes for the rollouts; results do not depend on it

    Returns:
        Tuple (states N x n, final states K x n)
    """
    rollouts = _collect(prob, V, trajectories, horizon, carry_state, seed, workers, record=False)
    states = np.vstack([r.states for r in rollouts])
    return states, np.array([r.final_state for r in rollouts])


def _evaluate_cost(prob, V, config):
    if config.eval_steps == 0:
        return math.nan, math.nan
    estimate = average_cost(prob, QadpPolicy(prob, V), config.eval_steps, config.eval_burn_in,
                            derive_seed(config.seed, EVALUATION_STREAM))
    return estimate.mean, estimate.stderr


def _iterate(prob, config, initial, method):
    V = initial if initial is not None else QuadraticFunction.zeros(prob.n)
    if V.n != prob.n:
        raise ValueError(f"Initial value function has dimension {V.n}, problem has {prob.n}")
    gradient = method == 'vgi'
    fitter = fit_value_gradient if gradient else fit_values
    history = IterationHistory()
    N = config.samples_per_iter

    try:
        cost, stderr = _evaluate_cost(prob, V, config)
    except VgiError as e:
        raise IterationAborted(f"Evaluating the initial policy failed: {str(e)}", history, V) from e
    history.append(IterationRecord(0, 0, cost, stderr, math.nan, V))
    logger.info(f"{method.upper()} iteration 0: avg cost {cost:.4f}")

    carry = None
    for k in range(1, config.iterations + 1):
        try:
            rollouts = _collect(prob, V, config.trajectories, config.horizon, carry,
                                derive_seed(config.seed, ROLLOUT_STREAM, k), config.workers)
            samples = []
            for rollout in rollouts:
                for x, result in zip(rollout.states, rollout.evaluations):
                    samples.append(FitSample(x, result.gradient if gradient else result.objective))
            V_half = fitter(samples, config.fit)
            residual = fit_loss(V_half, samples, config.fit)
            V = damped_combine(V_half, V, config.rho)
            cost, stderr = _evaluate_cost(prob, V, config)
        except VgiError as e:
            raise IterationAborted(f"Iteration {k} failed: {str(e)}", history, V) from e
        carry = [rollout.final_state for rollout in rollouts]
        history.append(IterationRecord(k, k * N, cost, stderr, residual, V))
        logger.info(f"{method.upper()} iteration {k}: {k * N} policy evaluations, "
                    f"avg cost {cost:.4f} (stderr {stderr:.4f}), fit residual {residual:.3e}")

    return V, history


def run_vgi(prob, config, initial=None):
    """
    Value-gradient iteration.

    Args:
        prob: ControlProblem
        config: IterationConfig
        initial: Starting value function V^1 (zero when omitted)

    Returns:
        Tuple (final QuadraticFunction, IterationHistory)

    Raises:
        IterationAborted: a rollout or fit failed; carries the partial history
    """
    return _iterate(prob, config, initial, 'vgi')


def run_fvi(prob, config, initial=None):
    """Fitted value iteration; same loop as run_vgi but fitting Bellman values."""
    return _iterate(prob, config, initial, 'fvi')
