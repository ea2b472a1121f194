"""
Expected value of a quadratic at the next state, E V(A x + B u + c), and
Monte-Carlo estimation of the dynamics moments it needs.
"""
import logging

import numpy as np

from .model import DynamicsModel, DynamicsMoments, QuadraticFunction, symmetrize

logger = logging.getLogger(__name__)

DEFAULT_MOMENT_SAMPLES = 10000
DEFAULT_MOMENT_SEED = 20230101
_BATCH = 10000


def moments_from_samples(sampler, count=DEFAULT_MOMENT_SAMPLES, seed=DEFAULT_MOMENT_SEED):
    """
    Estimate stacked dynamics moments from `count` IID draws.

    Means are sample means and covariances are the unbiased sample
    covariances. Draws are shifted by the first draw before accumulating, so
    deterministic samplers produce covariances that are exactly zero.

    Args:
        sampler: DynamicsSampler (or DynamicsModel) with `draw_batch`
        count: Number of draws, at least 2
        seed: Seed of the owned generator

    Returns:
        DynamicsMoments with source 'monte-carlo'
    """
    if count < 2:
        raise ValueError(f"At least 2 samples are needed to estimate moments, got {count}")
    if isinstance(sampler, DynamicsModel):
        sampler = sampler.sampler

    rng = np.random.default_rng(seed)
    shift = None
    total = None
    cross = None
    remaining = count
    while remaining > 0:
        size = min(_BATCH, remaining)
        A, B, c = sampler.draw_batch(rng, size)
        W = np.concatenate([A, B, c[:, :, None]], axis=2)
        if shift is None:
            shift = W[0].copy()
            n, k = shift.shape
            total = np.zeros(n * k)
            cross = np.zeros((n * k, n * k))
        D = (W - shift).reshape(size, -1)
        total += D.sum(axis=0)
        cross += D.T @ D
        remaining -= size

    n, k = shift.shape
    delta = total / count
    mean = shift + delta.reshape(n, k)
    covariance = (cross - count * np.outer(delta, delta)) / (count - 1)
    # Flat index a * k + i is entry (a, i) of W; reorder to [i, j, a, b].
    covariance = covariance.reshape(n, k, n, k).transpose(1, 3, 0, 2)
    logger.debug(f"Estimated dynamics moments from {count} samples")
    return DynamicsMoments.from_mean_and_covariance(mean, covariance, source=f'monte-carlo({count})')


def expected_joint(V, moments):
    """
    Matrix K with E V(W z) = 1/2 z^T K z for z = (x, u, 1) and W = [A B c].

    K = E[W^T P W] + e (W^T p) ^T + (W^T p) e^T + 2 pi e e^T, with W at its mean
    in the linear terms and e the last unit vector.
    """
    _check_dimensions(V, moments)
    K = moments.expected_form(V.P)
    linear = moments.mean.T @ V.p
    K[-1, :] += linear
    K[:, -1] += linear
    K[-1, -1] += 2.0 * V.pi
    return symmetrize(K)


def expected_quadratic(V, moments, x):
    """
    Coefficients of E V(A x + B u + c) = 1/2 u^T M u + m_vec^T u + 1/2 mu.

    Args:
        V: QuadraticFunction
        moments: DynamicsMoments
        x: State

    Returns:
        Tuple (M, m_vec, mu)
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (moments.n,):
        raise ValueError(f"State has dimension {x.shape[0]}, dynamics expect {moments.n}")
    K = expected_joint(V, moments)
    n, m = moments.n, moments.m
    Kxx = K[:n, :n]
    Kxu = K[:n, n:n + m]
    Kuu = K[n:n + m, n:n + m]
    Kx1 = K[:n, -1]
    Ku1 = K[n:n + m, -1]
    M = symmetrize(Kuu)
    m_vec = Kxu.T @ x + Ku1
    mu = float(x @ Kxx @ x + 2.0 * Kx1 @ x + K[-1, -1])
    return M, m_vec, mu


def expected_value(V, moments, x, u):
    """E V(A x + B u + c) at a given state and input."""
    u = np.asarray(u, dtype=float).reshape(-1)
    M, m_vec, mu = expected_quadratic(V, moments, x)
    return float(0.5 * u @ M @ u + m_vec @ u + 0.5 * mu)


def _check_dimensions(V, moments):
    if not isinstance(V, QuadraticFunction):
        raise ValueError("Expected a QuadraticFunction")
    if V.n != moments.n:
        raise ValueError(f"Value function has dimension {V.n}, dynamics have {moments.n}")
