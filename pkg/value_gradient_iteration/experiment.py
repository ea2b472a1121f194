import json
import logging
import os
import platform
from dataclasses import replace

import cvxpy
import numpy as np
import pandas as pd

from . import __version__
from .baselines import CeMpcPolicy, ce_lqr_lower_bound
from .exceptions import IterationAborted
from .fitting import quadratic_dominates
from .iteration import EVALUATION_STREAM, IterationHistory, IterationRecord, run_fvi, run_vgi
from .model import QuadraticFunction, derive_seed
from .policy import QadpPolicy, average_cost
from .problems import build_problem, default_relaxation, problem_to_dict

logger = logging.getLogger(__name__)

METHODS = ('vgi', 'fvi', 'mpc')


def load_value_function(path):
    """Read a value-function JSON file {n, P, p, pi}."""
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"Cannot read value function {path}: {str(e)}") from e
    return QuadraticFunction.from_dict(data)


def write_json(path, data):
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
    logger.info(f"Wrote {path}")


def versions():
    return {
        'value_gradient_iteration': __version__,
        'numpy': np.__version__,
        'pandas': pd.__version__,
        'cvxpy': cvxpy.__version__,
        'python': platform.python_version(),
    }


class ExperimentRunner:
    """
    Runs experiments on the registered benchmarks and writes their result files
    """

    def __init__(self, output_directory='results'):
        self.output_directory = output_directory

    def run(self, problem, method, config, params=None, problem_seed=0, lower_bound=False,
            horizon=30, terminal=None, literal_scaling=False):
        """
        Run VGI, FVI or CE-MPC on a benchmark and write its results

        Args:
            problem: Registered problem name
            method: 'vgi', 'fvi' or 'mpc'
            config: IterationConfig (for mpc only seed, eval_steps and eval_burn_in are used)
            params: Optional problem parameter overrides
            problem_seed: Seed of the problem generator
            lower_bound: Add the certainty-equivalent LQR lower bound to the fit
            horizon: MPC horizon
            terminal: Optional MPC terminal cost
            literal_scaling: Weight the MPC stage sum by 1/(H+1)

        Returns:
            Tuple (output directory, IterationHistory)
        """
        if method not in METHODS:
            raise ValueError(f"Unknown method '{method}', expected one of {METHODS}")
        logger.info(f"Starting {method} on {problem}")
        prob, V1 = build_problem(problem, params, problem_seed)
        output_dir = self._output_dir(f"{problem}_{method}_seed{config.seed}")

        settings = {
            'problem': problem,
            'problem_seed': problem_seed,
            'params': prob.params,
            'method': method,
            'config': config.to_dict(),
        }
        if method == 'mpc':
            settings['horizon'] = horizon
            settings['terminal'] = terminal is not None
            settings['literal_scaling'] = literal_scaling
            history, V = self._run_mpc(prob, config, horizon, terminal, literal_scaling), None
        else:
            settings['lower_bound'] = lower_bound
            if lower_bound:
                V_lb = ce_lqr_lower_bound(prob, default_relaxation(prob))
                config = replace(config, fit=config.fit.with_lower_bound(V_lb))
            runner = run_vgi if method == 'vgi' else run_fvi
            try:
                V, history = runner(prob, config, V1)
            except IterationAborted as e:
                logger.error(f"Run aborted: {str(e)}")
                self._write_results(output_dir, prob, settings, e.history, e.value_function)
                raise
        self._write_results(output_dir, prob, settings, history, V)
        logger.info(f"Experiment completed successfully. Output directory: {output_dir}")
        return output_dir, history

    def evaluate(self, problem, V, steps, seed=0, burn_in=None, params=None, problem_seed=0,
                 trajectory_path=None):
        """
        Average cost of the QADP policy for V, optionally writing the trajectory

        Returns:
            CostEstimate
        """
        if steps <= 0:
            raise ValueError(f"steps must be positive, got {steps}")
        prob, _ = build_problem(problem, params, problem_seed)
        estimate = average_cost(prob, QadpPolicy(prob, V), steps, burn_in, seed)
        if trajectory_path:
            header = self._header({'problem': problem, 'problem_seed': problem_seed, 'steps': steps,
                                   'seed': seed, 'burn_in': estimate.burn_in})
            with open(trajectory_path, 'w', newline='') as f:
                for line in header:
                    f.write(f"# {line}\n")
                estimate.trajectory.to_frame().to_csv(f, index=False, float_format='%.10g')
            logger.info(f"Wrote {trajectory_path}")
        return estimate

    def bound(self, problem, params=None, problem_seed=0, compare=None, output_path=None):
        """
        Certainty-equivalent LQR lower bound of a benchmark

        Args:
            compare: Optional QuadraticFunction checked against the bound in both directions
            output_path: Where to write the bound JSON

        Returns:
            Tuple (V_lb, dict of dominance checks)
        """
        prob, _ = build_problem(problem, params, problem_seed)
        relaxation = default_relaxation(prob)
        V_lb = ce_lqr_lower_bound(prob, relaxation)
        checks = {}
        if compare is not None:
            checks = {
                'compare_dominates_bound': quadratic_dominates(compare, V_lb),
                'bound_dominates_compare': quadratic_dominates(V_lb, compare),
            }
        if output_path:
            write_json(output_path, {**V_lb.to_dict(), 'relaxation': relaxation.to_dict(),
                                     'problem': problem, 'problem_seed': problem_seed})
        return V_lb, checks

    def _run_mpc(self, prob, config, horizon, terminal, literal_scaling):
        policy = CeMpcPolicy(prob, horizon, terminal, literal_scaling)
        history = IterationHistory()
        estimate = average_cost(prob, policy, config.eval_steps, config.eval_burn_in,
                                derive_seed(config.seed, EVALUATION_STREAM))
        history.append(IterationRecord(0, 0, estimate.mean, estimate.stderr, float('nan'), terminal))
        logger.info(f"CE-MPC (H={horizon}) average cost {estimate.mean:.4f} (stderr {estimate.stderr:.4f})")
        return history

    def _output_dir(self, name):
        output_dir = os.path.join(self.output_directory, name)
        if not os.path.exists(output_dir):
            os.makedirs(output_dir)
        return output_dir

    def _header(self, settings):
        return [json.dumps(settings, sort_keys=True), json.dumps({'versions': versions()}, sort_keys=True)]

    def _write_results(self, output_dir, prob, settings, history, V):
        """Write history CSV, value function, problem description and metadata"""
        history.to_csv(os.path.join(output_dir, "history.csv"), header=self._header(settings))
        logger.info(f"Wrote {os.path.join(output_dir, 'history.csv')}")
        if V is not None:
            write_json(os.path.join(output_dir, "value_function.json"), V.to_dict())
        write_json(os.path.join(output_dir, "problem.json"), problem_to_dict(prob))
        write_json(os.path.join(output_dir, "metadata.json"), {
            **settings,
            'iterations_completed': len(history) - 1,
            'moments_source': prob.dynamics.moments.source,
            'versions': versions(),
        })
