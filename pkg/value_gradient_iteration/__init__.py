"""
Value-Gradient Iteration

Quadratic approximate dynamic programming for convex stochastic control with
random linear dynamics, with fitted value iteration and certainty-equivalent
MPC baselines.
"""

__version__ = '0.1.0'

from .baselines import CeMpcPolicy, ce_lqr_lower_bound, ce_mpc_evaluate, ce_sso, lqr_value_iteration
from .exceptions import DivergenceError, FittingError, InfeasibleError, IterationAborted, SolverError, VgiError
from .experiment import ExperimentRunner
from .fitting import FitOptions, FitSample, fit_value_gradient, fit_values, quadratic_dominates
from .iteration import IterationConfig, run_fvi, run_vgi
from .model import ControlProblem, DynamicsModel, QuadraticFunction, StageCost
from .policy import QadpPolicy, average_cost, bellman_apply, qadp_evaluate, simulate
from .problems import build_problem

__all__ = [
    'CeMpcPolicy', 'ce_lqr_lower_bound', 'ce_mpc_evaluate', 'ce_sso', 'lqr_value_iteration',
    'DivergenceError', 'FittingError', 'InfeasibleError', 'IterationAborted', 'SolverError', 'VgiError',
    'ExperimentRunner',
    'FitOptions', 'FitSample', 'fit_value_gradient', 'fit_values', 'quadratic_dominates',
    'IterationConfig', 'run_fvi', 'run_vgi',
    'ControlProblem', 'DynamicsModel', 'QuadraticFunction', 'StageCost',
    'QadpPolicy', 'average_cost', 'bellman_apply', 'qadp_evaluate', 'simulate',
    'build_problem',
]
