import numpy as np
import pytest

from value_gradient_iteration.model import ControlProblem, DynamicsModel, QuadraticFunction, StageCost


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run benchmark reproduction tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long benchmark runs, enabled with --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def scalar_problem(a=1.0, b=1.0, c=0.0, noise=0.0, u_max=None, gamma=1.0):
    """x+ = a x + b u + c (+ noise), g = x^2 + u^2, optionally |u| <= u_max."""
    if noise:
        dynamics = DynamicsModel.additive_gaussian([[a]], [[b]], [c], [[noise ** 2]])
    else:
        dynamics = DynamicsModel.deterministic([[a]], [[b]], [c])
    box = {}
    if u_max is not None:
        box = dict(ineq_matrix=[[0.0, 1.0], [0.0, -1.0]], ineq_rhs=[u_max, u_max])
    cost = StageCost(1, 1, Qxx=[[1.0]], Quu=[[1.0]], **box)
    return ControlProblem(1, 1, dynamics, cost, gamma)


@pytest.fixture
def scalar_lqr():
    return scalar_problem()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_psd(rng, n, rank=None):
    F = rng.standard_normal((n, rank or n))
    return F @ F.T


def random_quadratic(rng, n):
    return QuadraticFunction(random_psd(rng, n), rng.standard_normal(n), float(rng.standard_normal()))
