import cvxpy as cp
import numpy as np
import pytest

from value_gradient_iteration.conic import FIT_TOLERANCES, SolverTolerances
from value_gradient_iteration.exceptions import FittingError
from value_gradient_iteration.fitting import (FitOptions, FitSample, damped_combine, fit_loss, fit_value_gradient,
                                              fit_values, huber, quadratic_dominates)
from value_gradient_iteration.model import QuadraticFunction, quad_eval

from conftest import random_psd, random_quadratic

N = 3
# Recovery checks compare parameters, which needs a tighter gap than the fitting default
EXACT = SolverTolerances(1e-11, 1e-11, 1e-10)
SQUARED = FitOptions(loss='squared', tolerances=EXACT)


def gradient_samples(V, points):
    return [FitSample(x, V.P @ x + V.p) for x in points]


def value_samples(V, points):
    return [FitSample(x, quad_eval(V, x)) for x in points]


@pytest.mark.parametrize('z, M, expected', [
    ([0.0, 0.0], 1.0, 0.0),
    ([0.6, 0.8], 1.0, 0.5),
    ([3.0, 0.0], 1.0, 2.5),
    ([3.0], 2.0, 4.0),
])
def test_huber(z, M, expected):
    assert huber(z, M) == pytest.approx(expected)


def test_huber_is_continuous_at_the_boundary():
    assert huber([1.0 - 1e-9], 1.0) == pytest.approx(huber([1.0 + 1e-9], 1.0), abs=1e-8)


def test_gradient_fit_recovers_affine_map(rng):
    V0 = QuadraticFunction(random_psd(rng, N), rng.standard_normal(N))
    points = rng.standard_normal((N + 1 + N * (N + 1) // 2, N))
    V = fit_value_gradient(gradient_samples(V0, points), SQUARED)
    np.testing.assert_allclose(V.P, V0.P, atol=1e-5)
    np.testing.assert_allclose(V.p, V0.p, atol=1e-5)


def test_gradient_fit_with_huber_loss_recovers_affine_map(rng):
    V0 = QuadraticFunction(random_psd(rng, N), rng.standard_normal(N))
    points = rng.standard_normal((20, N))
    V = fit_value_gradient(gradient_samples(V0, points), FitOptions(tolerances=EXACT))
    np.testing.assert_allclose(V.P, V0.P, atol=1e-5)


@pytest.mark.parametrize('tolerances', [EXACT, FIT_TOLERANCES])
def test_ridge_on_zero_targets_gives_zero(tolerances):
    samples = [FitSample(x, np.zeros(N)) for x in np.eye(N)]
    V = fit_value_gradient(samples, FitOptions(loss='squared', ridge=0.1, tolerances=tolerances))
    np.testing.assert_allclose(V.P, 0.0, atol=1e-6)
    np.testing.assert_allclose(V.p, 0.0, atol=1e-6)


def test_rank_deficient_fit_is_accurate_at_default_tolerances(rng):
    V0 = QuadraticFunction(random_psd(rng, N, rank=1), rng.standard_normal(N))
    V = fit_value_gradient(gradient_samples(V0, rng.standard_normal((12, N))), FitOptions(loss='squared'))
    np.testing.assert_allclose(V.P, V0.P, atol=1e-5)
    np.testing.assert_allclose(V.p, V0.p, atol=1e-5)
    assert np.linalg.matrix_rank(V.P, tol=1e-6) == 1


def oracle_gradient_fit(samples, loss, M=1.0):
    P = cp.Variable((N, N), PSD=True)
    p = cp.Variable(N)
    residuals = [P @ s.x + p - s.target for s in samples]
    if loss == 'squared':
        terms = [0.5 * cp.sum_squares(r) for r in residuals]
    else:
        # circular Huber as a minimum over an inlier/outlier split
        a = [cp.Variable(N) for _ in samples]
        terms = [0.5 * cp.sum_squares(ai) + M * cp.norm(r - ai) for ai, r in zip(a, residuals)]
    problem = cp.Problem(cp.Minimize(sum(terms) / len(samples)))
    problem.solve(solver=cp.CLARABEL, tol_gap_abs=1e-9, tol_gap_rel=1e-9, tol_feas=1e-9)
    return problem.value


def test_huber_beats_squared_loss_with_an_outlier(rng):
    V0 = QuadraticFunction(random_psd(rng, N), rng.standard_normal(N))
    points = rng.standard_normal((15, N))
    samples = gradient_samples(V0, points)
    samples[0] = FitSample(samples[0].x, samples[0].target + np.array([10.0, 0.0, 0.0]))

    robust = fit_value_gradient(samples, FitOptions(loss='huber', huber_m=1.0))
    plain = fit_value_gradient(samples, SQUARED)
    assert np.linalg.norm(robust.P - V0.P) < np.linalg.norm(plain.P - V0.P)

    huber_opts = FitOptions(loss='huber', huber_m=1.0)
    assert fit_loss(robust, samples, huber_opts) == pytest.approx(oracle_gradient_fit(samples, 'huber'), abs=1e-6)
    assert fit_loss(plain, samples, SQUARED) == pytest.approx(oracle_gradient_fit(samples, 'squared'), abs=1e-6)


def test_value_fit_recovers_quadratic(rng):
    V0 = QuadraticFunction(random_psd(rng, N), rng.standard_normal(N), 1.5)
    points = rng.standard_normal(((N * N + 3 * N) // 2 + 4, N))
    V = fit_values(value_samples(V0, points), SQUARED)
    np.testing.assert_allclose(V.P, V0.P, atol=1e-5)
    np.testing.assert_allclose(V.p, V0.p, atol=1e-5)
    assert V.pi == pytest.approx(1.5, abs=1e-5)


@pytest.mark.parametrize('tolerances', [EXACT, FIT_TOLERANCES])
def test_constant_values_under_ridge(rng, tolerances):
    samples = [FitSample(x, 7.0) for x in rng.standard_normal((10, N))]
    V = fit_values(samples, FitOptions(loss='squared', ridge=1e-3, tolerances=tolerances))
    np.testing.assert_allclose(V.P, 0.0, atol=1e-5)
    np.testing.assert_allclose(V.p, 0.0, atol=1e-5)
    assert V.pi == pytest.approx(7.0, abs=1e-4)


def test_value_fit_with_outlier_matches_oracle(rng):
    V0 = QuadraticFunction(random_psd(rng, N), rng.standard_normal(N))
    samples = value_samples(V0, rng.standard_normal((20, N)))
    samples[3] = FitSample(samples[3].x, samples[3].target + 25.0)
    opts = FitOptions(loss='huber', huber_m=1.0)
    V = fit_values(samples, opts)

    P, p, c = cp.Variable((N, N), PSD=True), cp.Variable(N), cp.Variable()
    residuals = cp.hstack([0.5 * (s.x @ P @ s.x) + p @ s.x + c - s.target for s in samples])
    problem = cp.Problem(cp.Minimize(cp.sum(cp.huber(residuals, 1.0)) / (2 * len(samples))))
    problem.solve(solver=cp.CLARABEL, tol_gap_abs=1e-9, tol_gap_rel=1e-9, tol_feas=1e-9)
    assert fit_loss(V, samples, opts) == pytest.approx(problem.value, abs=1e-6)


def test_symmetric_fit_has_no_linear_term(rng):
    V0 = QuadraticFunction(random_psd(rng, N), rng.standard_normal(N))
    V = fit_value_gradient(gradient_samples(V0, rng.standard_normal((10, N))), FitOptions(symmetric=True))
    np.testing.assert_array_equal(V.p, 0.0)


def test_fixed_minimizer(rng):
    x_star = np.array([1.0, -1.0, 0.5])
    V0 = QuadraticFunction(random_psd(rng, N), rng.standard_normal(N))
    V = fit_value_gradient(gradient_samples(V0, rng.standard_normal((10, N))),
                           FitOptions(fixed_minimizer=x_star))
    np.testing.assert_allclose(V.P @ x_star + V.p, 0.0, atol=1e-6)


def test_lasso_shrinks_parameters(rng):
    V0 = QuadraticFunction(random_psd(rng, N), rng.standard_normal(N))
    samples = gradient_samples(V0, rng.standard_normal((10, N)))
    loose = fit_value_gradient(samples, SQUARED)
    tight = fit_value_gradient(samples, FitOptions(loss='squared', lasso=1.0, tolerances=EXACT))
    assert np.abs(tight.P).sum() + np.abs(tight.p).sum() < np.abs(loose.P).sum() + np.abs(loose.p).sum()


def test_lasso_zeroes_unsupported_entries(rng):
    V0 = QuadraticFunction(np.diag([3.0, 2.0, 4.0]), [1.0, 0.0, 0.0])
    points = rng.standard_normal((40, N))
    samples = [FitSample(x, V0.P @ x + V0.p + 0.05 * rng.standard_normal(N)) for x in points]
    plain = fit_value_gradient(samples, SQUARED)
    sparse = fit_value_gradient(samples, FitOptions(loss='squared', lasso=0.5, tolerances=EXACT))
    off = ~np.eye(N, dtype=bool)
    assert np.abs(plain.P[off]).max() > 1e-4
    np.testing.assert_allclose(sparse.P[off], 0.0, atol=1e-6)
    np.testing.assert_allclose(sparse.p[1:], 0.0, atol=1e-6)
    assert np.all(np.diag(sparse.P) > 1.0)


def test_huber_matches_squared_loss_inside_the_radius(rng):
    V0 = QuadraticFunction(random_psd(rng, N), rng.standard_normal(N))
    points = rng.standard_normal((20, N))
    samples = [FitSample(x, V0.P @ x + V0.p + 0.1 * rng.standard_normal(N)) for x in points]
    plain = fit_value_gradient(samples, SQUARED)
    residuals = [np.linalg.norm(plain.P @ s.x + plain.p - s.target) for s in samples]
    assert max(residuals) < 10.0
    robust = fit_value_gradient(samples, FitOptions(loss='huber', huber_m=10.0, tolerances=EXACT))
    np.testing.assert_allclose(robust.P, plain.P, atol=1e-5)
    np.testing.assert_allclose(robust.p, plain.p, atol=1e-5)
    assert fit_loss(robust, samples, FitOptions(huber_m=10.0)) == pytest.approx(fit_loss(plain, samples, SQUARED),
                                                                              rel=1e-5)


def test_lower_bound_fit_dominates(rng):
    V_lb = QuadraticFunction(np.eye(N), np.ones(N))
    steep = QuadraticFunction(3.0 * np.eye(N), rng.standard_normal(N))
    V = fit_value_gradient(gradient_samples(steep, rng.standard_normal((10, N))),
                           FitOptions().with_lower_bound(V_lb))
    assert quadratic_dominates(V, V_lb, tol=1e-7)


def test_lower_bound_binds_for_flat_targets(rng):
    V_lb = QuadraticFunction(np.eye(N), np.zeros(N))
    flat = QuadraticFunction(0.1 * np.eye(N), np.zeros(N))
    V = fit_value_gradient(gradient_samples(flat, rng.standard_normal((10, N))),
                           FitOptions().with_lower_bound(V_lb))
    excess = np.linalg.eigvalsh(V.P - V_lb.P)
    assert excess[0] >= -1e-7
    assert excess[0] < 0.1


def test_value_fit_with_lower_bound_keeps_curvature(rng):
    # the offset is fitted freely, so only P - P_lb >= 0 is enforced
    V_lb = QuadraticFunction(np.eye(N), np.zeros(N), 0.0)
    samples = [FitSample(x, 0.0) for x in rng.standard_normal((12, N))]
    V = fit_values(samples, FitOptions(loss='squared').with_lower_bound(V_lb))
    assert np.linalg.eigvalsh(V.P - V_lb.P)[0] >= -1e-6


def test_mixed_samples_are_rejected():
    with pytest.raises(ValueError):
        fit_value_gradient([FitSample([1.0], 2.0)])


def test_infeasible_fixed_minimizer_with_symmetry_and_bound():
    # p = 0 and P x* = 0 with P >= I cannot hold
    opts = FitOptions(symmetric=True, fixed_minimizer=(1.0,)).with_lower_bound(QuadraticFunction([[1.0]], [0.0]))
    with pytest.raises(FittingError):
        fit_value_gradient([FitSample([1.0], [1.0])], opts)


@pytest.mark.parametrize('V1, V2, expected', [
    (QuadraticFunction(np.eye(2), np.zeros(2)), QuadraticFunction(np.eye(2), np.zeros(2)), True),
    (QuadraticFunction(2 * np.eye(2), np.zeros(2)), QuadraticFunction(np.eye(2), np.zeros(2)), True),
    (QuadraticFunction(np.eye(2), [1.0, 0.0]), QuadraticFunction(np.eye(2), np.zeros(2)), False),
    (QuadraticFunction(np.eye(2), np.zeros(2), -1.0), QuadraticFunction(np.eye(2), np.zeros(2)), False),
])
def test_quadratic_dominates(V1, V2, expected):
    assert quadratic_dominates(V1, V2) is expected


def dominance_pair(rng, n, kind):
    """
    V1 = V2 + D with the minimum of D known: it is s >= 0.05 for a dominating
    pair and negative or unbounded below otherwise.
    """
    U, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eigenvalues = rng.uniform(0.1, 2.0, n)
    eigenvalues[rng.random(n) < 0.3] = 0.0
    if kind == 'indefinite':
        eigenvalues[0] = -rng.uniform(0.05, 1.0)
    if kind == 'outside_range':
        eigenvalues[0] = 0.0
    dP = (U * eigenvalues) @ U.T
    w = rng.standard_normal(n)
    dp = dP @ w
    if kind == 'outside_range':
        dp = dp + rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 1.0) * U[:, 0]
    s = rng.uniform(0.05, 1.0) * (1.0 if kind == 'dominating' else rng.choice([-1.0, 1.0]))
    dpi = 0.5 * w @ dP @ w + s
    V2 = QuadraticFunction(random_psd(rng, n) + 2 * np.eye(n), rng.standard_normal(n), float(rng.standard_normal()))
    V1 = QuadraticFunction(V2.P + dP, V2.p + dp, V2.pi + dpi)
    witnesses = np.vstack([-w, -w + 1e4 * U.T, -w - 1e4 * U.T, 10 * rng.standard_normal((500, n))])
    gap = 0.5 * np.einsum('ti,ij,tj->t', witnesses, dP, witnesses) + witnesses @ dp + dpi
    return V1, V2, gap


@pytest.mark.parametrize('seed', range(4))
def test_quadratic_dominates_agrees_with_sampled_gap(seed):
    rng = np.random.default_rng(seed)
    for _ in range(50):
        n = int(rng.integers(1, 5))
        kind = rng.choice(['dominating', 'dominating', 'indefinite', 'outside_range'])
        V1, V2, gap = dominance_pair(rng, n, kind)
        if kind == 'dominating':
            assert quadratic_dominates(V1, V2)
            assert gap.min() >= -1e-6
        else:
            assert not quadratic_dominates(V1, V2)
            assert gap.min() < 0.0


def test_damped_combine():
    V_half = QuadraticFunction(2 * np.eye(2), np.ones(2), 1.0)
    V_prev = QuadraticFunction.zeros(2)
    assert damped_combine(V_half, V_prev, 1.0) is V_half
    np.testing.assert_allclose(damped_combine(V_half, V_prev, 0.5).P, np.eye(2))


def test_damped_combine_is_pointwise_linear(rng):
    V_half, V_prev = random_quadratic(rng, 3), random_quadratic(rng, 3)
    rho = 0.3
    V = damped_combine(V_half, V_prev, rho)
    for x in rng.standard_normal((5, 3)):
        assert quad_eval(V, x) == pytest.approx(rho * quad_eval(V_half, x) + (1 - rho) * quad_eval(V_prev, x),
                                                abs=1e-12)


def test_damped_combine_rejects_bad_rho():
    with pytest.raises(ValueError):
        damped_combine(QuadraticFunction.zeros(1), QuadraticFunction.zeros(1), 0.0)
