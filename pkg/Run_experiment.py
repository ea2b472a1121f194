from value_gradient_iteration.experiment import ExperimentRunner
from value_gradient_iteration.fitting import FitOptions
from value_gradient_iteration.iteration import IterationConfig
import logging
import sys


def main():
    if len(sys.argv) < 2:
        print("Usage: python Run_experiment.py <box-lqr|commitments|supply-chain> [seed]")
        return

    problem = sys.argv[1]
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    # Benchmark settings: N = 50 samples, rho = 0.5, lower bound on
    fit = FitOptions(symmetric=problem == 'box-lqr', ridge=1e-4 if problem == 'supply-chain' else 0.0)
    iterations = 40 if problem == 'box-lqr' else 20
    config = IterationConfig(iterations=iterations, trajectories=1, horizon=50, rho=0.5, fit=fit, seed=seed)

    print(f"Running VGI and CE-MPC on {problem}...")
    runner = ExperimentRunner()
    try:
        vgi_dir, vgi_history = runner.run(problem, 'vgi', config, lower_bound=True)
        mpc_dir, mpc_history = runner.run(problem, 'mpc', config, horizon=30)
        print(f"\nVGI average cost:    {vgi_history.final.avg_cost:.4f}  ({vgi_dir})")
        print(f"CE-MPC average cost: {mpc_history.final.avg_cost:.4f}  ({mpc_dir})")
    except Exception as e:
        print(f"Error during experiment: {str(e)}")


if __name__ == "__main__":
    main()
