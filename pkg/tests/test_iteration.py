import numpy as np
import pytest

from value_gradient_iteration.exceptions import IterationAborted
from value_gradient_iteration.fitting import FitOptions
from value_gradient_iteration.iteration import HISTORY_COLUMNS, IterationConfig, collect_samples, run_fvi, run_vgi
from value_gradient_iteration.model import (ControlProblem, DynamicsModel, FixedState, QuadraticFunction,
                                            StageCost, is_psd)
from value_gradient_iteration.policy import QadpPolicy, simulate
from value_gradient_iteration.problems import BoxLqrParams, make_box_lqr

from conftest import scalar_problem

PHI = (1 + np.sqrt(5)) / 2
RICCATI_P = 2 * PHI


def riccati_config(**overrides):
    settings = dict(iterations=30, trajectories=1, horizon=20, rho=1.0, seed=0, eval_steps=0)
    settings.update(overrides)
    return IterationConfig(**settings)


def test_single_trajectory_matches_simulate():
    dynamics = DynamicsModel.deterministic([[0.9]], [[1.0]], [0.1])
    prob = ControlProblem(1, 1, dynamics, StageCost(1, 1, Qxx=[[1.0]], Quu=[[1.0]]),
                          initial_state=FixedState([2.0]))
    V = QuadraticFunction([[2.0]], [0.0])
    states, finals = collect_samples(prob, V, 1, 5, seed=4)
    direct = simulate(prob, QadpPolicy(prob, V), [2.0], 5, seed=0)
    assert states.shape == (5, 1)
    np.testing.assert_allclose(states, direct.states, atol=1e-9)
    np.testing.assert_allclose(finals[0], direct.final_state, atol=1e-9)


def test_sample_count_is_trajectories_times_horizon():
    prob = scalar_problem(noise=0.1)
    states, finals = collect_samples(prob, QuadraticFunction([[2.0]], [0.0]), 2, 3, seed=1)
    assert states.shape == (6, 1)
    assert finals.shape == (2, 1)
    assert not np.allclose(states[:3], states[3:])


def test_collect_samples_is_reproducible():
    prob = scalar_problem(noise=0.1)
    V = QuadraticFunction([[2.0]], [0.0])
    first, _ = collect_samples(prob, V, 2, 4, seed=9)
    second, _ = collect_samples(prob, V, 2, 4, seed=9)
    np.testing.assert_array_equal(first, second)


def test_carried_states_start_the_rollouts():
    prob = scalar_problem(noise=0.1)
    states, _ = collect_samples(prob, QuadraticFunction.zeros(1), 2, 2, carry_state=[[1.0], [-1.0]], seed=0)
    np.testing.assert_allclose(states[[0, 2], 0], [1.0, -1.0])


def test_worker_count_does_not_change_samples():
    prob = scalar_problem(noise=0.1)
    V = QuadraticFunction([[2.0]], [0.0])
    serial, _ = collect_samples(prob, V, 3, 4, seed=2, workers=1)
    parallel, _ = collect_samples(prob, V, 3, 4, seed=2, workers=2)
    np.testing.assert_array_equal(serial, parallel)


@pytest.mark.parametrize('runner', [run_vgi, run_fvi])
def test_scalar_lqr_converges_to_riccati(runner):
    prob = scalar_problem(noise=0.1)
    V, history = runner(prob, riccati_config(fit=FitOptions(loss='squared')))
    assert V.P[0, 0] == pytest.approx(RICCATI_P, abs=1e-2)
    assert len(history) == 31
    assert all(is_psd(record.value_function.P) for record in history.records)


@pytest.mark.parametrize('runner', [run_vgi, run_fvi])
def test_unconstrained_lqr_is_fitted_exactly_every_iteration(runner):
    rng = np.random.default_rng(11)
    n = 2
    dynamics = DynamicsModel.additive_gaussian(0.6 * rng.standard_normal((n, n)), np.eye(n), np.zeros(n),
                                               0.01 * np.eye(n))
    prob = ControlProblem(n, n, dynamics, StageCost(n, n, Qxx=np.eye(n), Quu=np.eye(n)))
    config = riccati_config(iterations=5, horizon=12, fit=FitOptions(loss='squared'))
    _, history = runner(prob, config)
    residuals = history.to_frame()['fit_residual'][1:]
    assert len(residuals) == 5
    assert np.all(residuals <= 1e-6)


@pytest.mark.parametrize('runner', [run_vgi, run_fvi])
def test_zero_iterations_return_the_initial_value_function(runner):
    prob = scalar_problem(noise=0.1)
    V1 = QuadraticFunction([[2.0]], [0.0])
    V, history = runner(prob, riccati_config(iterations=0, eval_steps=100), V1)
    assert V is V1
    assert len(history) == 1
    assert history.final.policy_evals == 0
    assert np.isfinite(history.final.avg_cost)


def test_history_accounting(tmp_path):
    prob, V1 = make_box_lqr(BoxLqrParams(n=4, m=2))
    config = IterationConfig(iterations=2, trajectories=2, horizon=5, rho=0.5, seed=1, eval_steps=200)
    V, history = run_vgi(prob, config, V1)
    frame = history.to_frame()
    assert list(frame.columns) == HISTORY_COLUMNS
    assert frame['policy_evals'].tolist() == [0, 10, 20]
    assert np.isnan(frame['fit_residual'][0])
    assert np.all(np.isfinite(frame['avg_cost']))
    assert history.final.value_function is V

    path = tmp_path / 'history.csv'
    history.to_csv(path, header=['{"seed": 1}'])
    lines = path.read_text().splitlines()
    assert lines[0] == '# {"seed": 1}'
    assert lines[1] == ','.join(HISTORY_COLUMNS)


def test_runs_are_deterministic():
    prob, V1 = make_box_lqr(BoxLqrParams(n=4, m=2))
    config = IterationConfig(iterations=2, horizon=5, seed=3, eval_steps=100)
    first, history_a = run_vgi(prob, config, V1)
    second, history_b = run_vgi(prob, config, V1)
    np.testing.assert_array_equal(first.P, second.P)
    assert history_a.to_frame().equals(history_b.to_frame())


def test_failed_rollout_keeps_partial_history():
    dynamics = DynamicsModel.deterministic([[1.0]], [[1.0]], [0.0])
    # no input satisfies u <= x - 1, u >= 0 at x = 0
    cost = StageCost(1, 1, Quu=[[1.0]], ineq_matrix=[[-1.0, 1.0], [0.0, -1.0]], ineq_rhs=[-1.0, 0.0])
    prob = ControlProblem(1, 1, dynamics, cost, initial_state=FixedState([0.0]))
    with pytest.raises(IterationAborted) as info:
        run_vgi(prob, IterationConfig(iterations=3, horizon=2, eval_steps=0))
    assert len(info.value.history) == 1
    assert info.value.value_function.n == 1


@pytest.mark.parametrize('settings', [dict(rho=0.0), dict(rho=1.5), dict(horizon=0), dict(workers=0)])
def test_invalid_config(settings):
    with pytest.raises(ValueError):
        IterationConfig(**settings)
