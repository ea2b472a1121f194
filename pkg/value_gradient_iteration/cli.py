import argparse
import json
import logging
import sys

from .exceptions import VgiError
from .experiment import ExperimentRunner, load_value_function
from .fitting import LOSSES, FitOptions
from .iteration import IterationConfig
from .problems import PROBLEMS

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(ValueError):
    pass


def _json_object(text):
    try:
        value = json.loads(text)
    except json.JSONDecodeError as e:
        raise argparse.ArgumentTypeError(f"invalid JSON: {e}")
    if not isinstance(value, dict):
        raise argparse.ArgumentTypeError("expected a JSON object")
    return value


def _on_off(text):
    if text not in ('on', 'off'):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == 'on'


def _add_problem_arguments(parser):
    parser.add_argument('--problem', required=True, choices=sorted(PROBLEMS),
                        help='Benchmark problem')
    parser.add_argument('--params', type=_json_object, default=None,
                        help='JSON object overriding problem parameters')
    parser.add_argument('--problem-seed', type=int, default=0,
                        help='Seed of the problem generator')


def build_parser():
    parser = argparse.ArgumentParser(
        prog='vgi',
        description='Value-gradient iteration and baselines for convex stochastic control'
    )
    parser.add_argument('-v', '--verbose', action='store_true', help='Enable verbose logging')
    subparsers = parser.add_subparsers(dest='command', required=True)

    run = subparsers.add_parser('run', help='Run VGI, FVI or CE-MPC and write its history')
    _add_problem_arguments(run)
    run.add_argument('--method', required=True, choices=('vgi', 'fvi', 'mpc'))
    run.add_argument('--iters', type=int, default=20, help='Outer iterations')
    run.add_argument('--samples', type=int, default=50, help='Policy evaluations N per iteration')
    run.add_argument('--traj', type=int, default=1, help='Trajectories K per iteration; N must be a multiple of K')
    run.add_argument('--rho', type=float, default=0.5, help='Damping coefficient')
    run.add_argument('--loss', choices=LOSSES, default='huber', help='Fitting loss')
    run.add_argument('--huber-m', type=float, default=1.0, help='Huber transition radius')
    run.add_argument('--ridge', type=float, default=0.0, help='Ridge weight')
    run.add_argument('--lasso', type=float, default=0.0, help='LASSO weight')
    run.add_argument('--lower-bound', type=_on_off, default=False, metavar='{on,off}',
                     help='Constrain fits to dominate the certainty-equivalent LQR bound')
    run.add_argument('--symmetric', action='store_true', help='Fit symmetric value functions (p = 0)')
    run.add_argument('--horizon', type=int, default=None, help='MPC horizon (mpc only, default 30)')
    run.add_argument('--terminal', default=None, help='Value-function JSON used as MPC terminal cost')
    run.add_argument('--literal-scaling', action='store_true',
                     help='Weight the MPC stage costs by 1/(H+1) against the terminal cost (mpc only)')
    run.add_argument('--eval-steps', type=int, default=10000, help='Steps of each cost evaluation')
    run.add_argument('--burn-in', type=int, default=None, help='Discarded steps, 10%% by default')
    run.add_argument('--seed', type=int, default=0, help='Root seed')
    run.add_argument('--workers', type=int, default=1, help='Processes used for rollouts')
    run.add_argument('--out', default='results', help='Output directory')

    evaluate = subparsers.add_parser('evaluate', help='Average cost of the QADP policy of a value function')
    _add_problem_arguments(evaluate)
    evaluate.add_argument('--value', required=True, help='Value-function JSON file')
    evaluate.add_argument('--steps', type=int, default=10000, help='Simulation length')
    evaluate.add_argument('--burn-in', type=int, default=None, help='Discarded steps, 10%% by default')
    evaluate.add_argument('--seed', type=int, default=0, help='Simulation seed')
    evaluate.add_argument('--trajectory', default=None, help='Optional CSV path for the trajectory')

    bound = subparsers.add_parser('bound', help='Certainty-equivalent LQR lower bound')
    _add_problem_arguments(bound)
    bound.add_argument('--compare', default=None, help='Value-function JSON checked against the bound')
    bound.add_argument('--out', default=None, help='Output JSON path')
    return parser


def cmd_run(args):
    if args.method in ('vgi', 'fvi') and (args.horizon is not None or args.terminal is not None
                                         or args.literal_scaling):
        raise UsageError("--horizon, --terminal and --literal-scaling only apply to --method mpc")
    if args.samples < 1 or args.traj < 1 or args.samples % args.traj:
        raise UsageError(f"--samples ({args.samples}) must be a positive multiple of --traj ({args.traj})")
    if args.method == 'mpc' and args.eval_steps == 0:
        raise UsageError("--method mpc needs --eval-steps > 0")

    fit = FitOptions(loss=args.loss, huber_m=args.huber_m, ridge=args.ridge, lasso=args.lasso,
                     symmetric=args.symmetric)
    config = IterationConfig(iterations=args.iters, trajectories=args.traj,
                             horizon=args.samples // args.traj, rho=args.rho, fit=fit, seed=args.seed,
                             eval_steps=args.eval_steps, eval_burn_in=args.burn_in, workers=args.workers)
    terminal = load_value_function(args.terminal) if args.terminal else None

    runner = ExperimentRunner(args.out)
    output_dir, history = runner.run(args.problem, args.method, config, args.params, args.problem_seed,
                                     lower_bound=args.lower_bound, horizon=args.horizon or 30,
                                     terminal=terminal, literal_scaling=args.literal_scaling)
    final = history.final
    print(f"Final average cost: {final.avg_cost:.6g} (stderr {final.avg_cost_stderr:.3g})")
    print(f"Output directory: {output_dir}")
    return EXIT_OK


def cmd_evaluate(args):
    if args.steps <= 0:
        raise UsageError(f"--steps must be positive, got {args.steps}")
    V = load_value_function(args.value)
    estimate = ExperimentRunner().evaluate(args.problem, V, args.steps, args.seed, args.burn_in,
                                           args.params, args.problem_seed, args.trajectory)
    print(json.dumps(estimate.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_bound(args):
    compare = load_value_function(args.compare) if args.compare else None
    V_lb, checks = ExperimentRunner().bound(args.problem, args.params, args.problem_seed, compare, args.out)
    print(json.dumps({**V_lb.to_dict(), **checks}, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    'run': cmd_run,
    'evaluate': cmd_evaluate,
    'bound': cmd_bound,
}


def main(argv=None):
    """
    Command-line interface for value-gradient iteration experiments
    """
    parser = build_parser()
    args = parser.parse_args(argv)

    # Set up logging
    log_level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=log_level, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    try:
        return COMMANDS[args.command](args)
    except ValueError as e:
        print(f"Error: {str(e)}")
        return EXIT_USAGE
    except VgiError as e:
        print(f"Error: {str(e)}")
        if args.verbose:
            import traceback
            traceback.print_exc()
        return EXIT_NUMERICAL


if __name__ == '__main__':
    sys.exit(main())
