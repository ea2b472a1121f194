"""
Benchmark problem generators: box-constrained LQR, commitments planning for
an alternative investments fund, and a multi-echelon supply chain.

Every generator is deterministic in (params, seed) and returns the problem
together with its initial value function V^1.
"""
import logging
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .baselines import RelaxationSpec, ce_lqr_lower_bound, ce_sso
from .model import (ControlProblem, DynamicsModel, DynamicsSampler, FixedState, GaussianState,
                    InitialStateDistribution, QuadraticFunction, StageCost, is_psd, min_eigenvalue,
                    psd_project)
from .moments import DEFAULT_MOMENT_SAMPLES, DEFAULT_MOMENT_SEED, moments_from_samples

logger = logging.getLogger(__name__)


def _tuples(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tuples(v) for v in value)
    return value


def _broadcast(value, size):
    return np.array(np.broadcast_to(np.asarray(value, dtype=float), (size,)))


class _Params:
    """JSON round-trip shared by the parameter structs."""

    def to_dict(self):
        return {key: (list(value) if isinstance(value, tuple) else value)
                for key, value in asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown {cls.__name__} fields: {sorted(unknown)}")
        return cls(**{key: _tuples(value) for key, value in data.items()})


@dataclass(frozen=True)
class BoxLqrParams(_Params):
    n: int = 12
    m: int = 3
    Q: tuple = None
    R: tuple = None
    u_max: float = 0.4
    noise_scale: float = 0.4
    gamma: float = 1.0

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("Box LQR dimensions must be positive")
        if self.u_max <= 0:
            raise ValueError(f"u_max must be positive, got {self.u_max}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")
        if not is_psd(self.state_cost):
            raise ValueError("Q must be positive semidefinite")
        if min_eigenvalue(self.input_cost) <= 0:
            raise ValueError("R must be positive definite")

    @property
    def state_cost(self):
        return np.eye(self.n) if self.Q is None else np.asarray(self.Q, dtype=float).reshape(self.n, self.n)

    @property
    def input_cost(self):
        return np.eye(self.m) if self.R is None else np.asarray(self.R, dtype=float).reshape(self.m, self.m)


def make_box_lqr(params=None, seed=0):
    """
    Box-constrained LQR: A with IID uniform [-1, 1] entries rescaled to
    spectral radius one, B uniform on [-0.5, 0.5], c ~ N(0, noise_scale I),
    g = x^T Q x + u^T R u with |u_i| <= u_max, and V^1(x) = x^T Q x.
    """
    params = params or BoxLqrParams()
    n, m = params.n, params.m
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1.0, 1.0, (n, n))
    A = A / np.max(np.abs(np.linalg.eigvals(A)))
    B = rng.uniform(-0.5, 0.5, (n, m))
    dynamics = DynamicsModel.additive_gaussian(A, B, np.zeros(n), params.noise_scale * np.eye(n))

    Q, R = params.state_cost, params.input_cost
    box = np.hstack([np.zeros((2 * m, n)), np.vstack([np.eye(m), -np.eye(m)])])
    cost = StageCost(n, m, Qxx=Q, Quu=R, ineq_matrix=box, ineq_rhs=params.u_max * np.ones(2 * m))
    prob = ControlProblem(n, m, dynamics, cost, params.gamma,
                          GaussianState(np.zeros(n), np.eye(n)),
                          name='box-lqr', seed=seed, params=params.to_dict())
    return prob, QuadraticFunction(2.0 * Q, np.zeros(n))


CORRELATION = (
    (1.00, -0.06, -0.05, 0.62, -0.32, -0.44),
    (-0.06, 1.00, -0.21, 0.18, 0.80, -0.12),
    (-0.05, -0.21, 1.00, 0.35, -0.27, -0.19),
    (0.62, 0.18, 0.35, 1.00, 0.18, -0.15),
    (-0.32, 0.80, -0.27, 0.18, 1.00, 0.37),
    (-0.44, -0.12, -0.19, -0.15, 0.37, 1.00),
)


@dataclass(frozen=True)
class CommitmentsParams(_Params):
    return_mean: tuple = (1.0, 1.1, 1.1, 1.0, 1.1, 1.1)
    return_std: tuple = (0.1, 0.2, 0.2, 0.1, 0.2, 0.1)
    return_corr: tuple = CORRELATION
    call_alpha: float = 2.0
    call_beta: tuple = (10.3, 10.0, 12.9, 10.5, 11.8, 10.5)
    dist_alpha: float = 3.0
    dist_beta: tuple = (13.0, 12.7, 15.9, 12.8, 13.2, 14.2)
    n_target: tuple = None
    target_low: float = 4.0
    target_high: float = 5.0
    u_max: float = 3.0
    penalty: float = 0.01
    moment_samples: int = DEFAULT_MOMENT_SAMPLES
    moment_seed: int = DEFAULT_MOMENT_SEED
    gamma: float = 1.0

    def __post_init__(self):
        m = self.m
        for name in ('return_std', 'call_beta', 'dist_beta'):
            if len(getattr(self, name)) != m:
                raise ValueError(f"{name} must have {m} entries")
        corr = np.asarray(self.return_corr, dtype=float)
        if corr.shape != (m, m) or not np.allclose(np.diag(corr), 1.0) or not np.allclose(corr, corr.T):
            raise ValueError("return_corr must be a symmetric matrix with unit diagonal")
        if min(self.return_mean) <= 0 or min(self.return_std) < 0:
            raise ValueError("Return means must be positive and deviations nonnegative")
        if self.call_alpha <= 0 or self.dist_alpha <= 0 or min(self.call_beta) <= 0 or min(self.dist_beta) <= 0:
            raise ValueError("Beta parameters must be positive")
        if self.n_target is not None and len(self.n_target) != m:
            raise ValueError(f"n_target must have {m} entries")
        if self.u_max <= 0 or self.penalty <= 0:
            raise ValueError("u_max and penalty must be positive")

    @property
    def m(self):
        return len(self.return_mean)

    def lognormal(self):
        """(mu, Sigma) of log r matching the return means, deviations and correlation."""
        mean = np.asarray(self.return_mean, dtype=float)
        std = np.asarray(self.return_std, dtype=float)
        variance = np.log1p((std / mean) ** 2)
        mu = np.log(mean) - 0.5 * variance
        corr = np.asarray(self.return_corr, dtype=float)
        if not is_psd(corr):
            logger.warning("Return correlation matrix is indefinite; projecting to the nearest PSD correlation")
            corr = psd_project(corr)
            scale = np.sqrt(np.diag(corr))
            corr = corr / np.outer(scale, scale)
        sd = np.sqrt(variance)
        return mu, corr * np.outer(sd, sd)


class CommitmentsSampler(DynamicsSampler):
    """
    Random (A, B, c) of the commitments model with state (nav, uncalled):

        A = [[diag(r (1 - g_dist)), diag(g_call)], [0, I - diag(g_call)]],
        B = [0; I],  c = 0,

    r log-normal and the intensities Beta distributed.
    """

    def __init__(self, params):
        self.m = params.m
        self.mu, covariance = params.lognormal()
        eigenvalues, eigenvectors = np.linalg.eigh(covariance)
        self.factor = eigenvectors * np.sqrt(np.maximum(eigenvalues, 0.0))
        self.call = (params.call_alpha, np.asarray(params.call_beta, dtype=float))
        self.dist = (params.dist_alpha, np.asarray(params.dist_beta, dtype=float))

    def draw(self, rng):
        A, B, c = self.draw_batch(rng, 1)
        return A[0], B[0], c[0]

    def draw_batch(self, rng, count):
        m = self.m
        returns = np.exp(self.mu + rng.standard_normal((count, m)) @ self.factor.T)
        call = rng.beta(self.call[0], self.call[1], size=(count, m))
        dist = rng.beta(self.dist[0], self.dist[1], size=(count, m))
        idx = np.arange(m)
        A = np.zeros((count, 2 * m, 2 * m))
        A[:, idx, idx] = returns * (1.0 - dist)
        A[:, idx, m + idx] = call
        A[:, m + idx, m + idx] = 1.0 - call
        B = np.zeros((count, 2 * m, m))
        B[:, m + idx, idx] = 1.0
        return A, B, np.zeros((count, 2 * m))


def make_commitments(params=None, seed=0):
    """
    Commitments planning: reach NAV targets n_tar with stage cost
    ||nav - n_tar||^2 + penalty ||u - u_ss||^2 and 0 <= u <= u_max, where u_ss
    is the steady-state optimal input of the penalty-free problem. V^1 is the
    certainty-equivalent LQR bound with the input box dropped.
    """
    params = params or CommitmentsParams()
    m = params.m
    n = 2 * m
    rng = np.random.default_rng(seed)
    n_target = (np.asarray(params.n_target, dtype=float) if params.n_target is not None
                else rng.uniform(params.target_low, params.target_high, m))
    params = replace(params, n_target=tuple(float(v) for v in n_target))

    sampler = CommitmentsSampler(params)
    dynamics = DynamicsModel(moments_from_samples(sampler, params.moment_samples, params.moment_seed),
                             sampler)
    Qxx = np.zeros((n, n))
    Qxx[:m, :m] = np.eye(m)
    qx = np.concatenate([-2.0 * n_target, np.zeros(m)])
    box = np.hstack([np.zeros((2 * m, n)), np.vstack([np.eye(m), -np.eye(m)])])
    box_rhs = np.concatenate([params.u_max * np.ones(m), np.zeros(m)])
    tracking = StageCost(n, m, Qxx=Qxx, qx=qx, q0=float(n_target @ n_target),
                         ineq_matrix=box, ineq_rhs=box_rhs)
    initial = FixedState(np.concatenate([n_target, np.zeros(m)]))
    base = ControlProblem(n, m, dynamics, tracking, params.gamma, initial)
    _, u_ss = ce_sso(base)
    u_ss = np.clip(u_ss, 0.0, params.u_max)
    logger.debug(f"Commitments steady-state input {np.round(u_ss, 4).tolist()}")

    cost = replace(tracking,
                   Quu=params.penalty * np.eye(m),
                   qu=-2.0 * params.penalty * u_ss,
                   q0=tracking.q0 + params.penalty * float(u_ss @ u_ss))
    prob = ControlProblem(n, m, dynamics, cost, params.gamma, initial,
                          name='commitments', seed=seed, params=params.to_dict())
    return prob, ce_lqr_lower_bound(prob, input_box_relaxation(params))


@dataclass(frozen=True)
class SupplyChainParams(_Params):
    warehouses: int = 4
    supplier_nodes: tuple = (0, 1)
    consumer_nodes: tuple = (2, 3)
    transport_links: tuple = ((0, 2), (1, 3), (0, 3), (3, 2))
    price_mean: tuple = (0.0, 0.1)
    price_var: float = 0.4
    demand_mean: tuple = (0.0, 0.4)
    demand_var: float = 0.4
    holding_linear: object = 0.01
    holding_quadratic: object = 0.01
    transport_cost: object = 0.05
    retail_price: object = 1.3
    h_max: object = 3.0
    u_max: object = 2.0
    moment_samples: int = DEFAULT_MOMENT_SAMPLES
    moment_seed: int = DEFAULT_MOMENT_SEED
    gamma: float = 1.0

    def __post_init__(self):
        if len(self.price_mean) != len(self.supplier_nodes):
            raise ValueError("price_mean must have one entry per supplier")
        if len(self.demand_mean) != len(self.consumer_nodes):
            raise ValueError("demand_mean must have one entry per consumer")
        nodes = list(self.supplier_nodes) + list(self.consumer_nodes) + \
            [node for link in self.transport_links for node in link]
        if any(node < 0 or node >= self.warehouses for node in nodes):
            raise ValueError("Network references a warehouse that does not exist")
        for name in ('h_max', 'u_max', 'retail_price'):
            if np.any(np.asarray(getattr(self, name), dtype=float) <= 0):
                raise ValueError(f"{name} must be positive")
        for name in ('holding_linear', 'holding_quadratic', 'transport_cost'):
            if np.any(np.asarray(getattr(self, name), dtype=float) < 0):
                raise ValueError(f"{name} must be nonnegative")
        if self.price_var < 0 or self.demand_var < 0:
            raise ValueError("Log-normal variances must be nonnegative")

    @property
    def suppliers(self):
        return len(self.supplier_nodes)

    @property
    def consumers(self):
        return len(self.consumer_nodes)

    @property
    def links(self):
        return self.suppliers + self.consumers + len(self.transport_links)

    @property
    def state_dim(self):
        return self.warehouses + self.suppliers + self.consumers

    def incidence(self):
        """
        (A_in, A_out): entry (i, j) is 1 when link j enters (leaves) warehouse i.
        Links are ordered buys, sales, transports.
        """
        A_in = np.zeros((self.warehouses, self.links))
        A_out = np.zeros((self.warehouses, self.links))
        for j, node in enumerate(self.supplier_nodes):
            A_in[node, j] = 1.0
        for j, node in enumerate(self.consumer_nodes):
            A_out[node, self.suppliers + j] = 1.0
        offset = self.suppliers + self.consumers
        for j, (source, target) in enumerate(self.transport_links):
            A_out[source, offset + j] = 1.0
            A_in[target, offset + j] = 1.0
        return A_in, A_out


class SupplyChainSampler(DynamicsSampler):
    """Constant A, B with c = (0, prices, demands), prices and demands log-normal."""

    def __init__(self, params):
        A_in, A_out = params.incidence()
        n, w = params.state_dim, params.warehouses
        self.A = np.zeros((n, n))
        self.A[:w, :w] = np.eye(w)
        self.B = np.zeros((n, params.links))
        self.B[:w] = A_in - A_out
        self.warehouses = w
        self.log_mean = np.concatenate([params.price_mean, params.demand_mean])
        self.log_std = np.concatenate([np.full(params.suppliers, np.sqrt(params.price_var)),
                                       np.full(params.consumers, np.sqrt(params.demand_var))])

    def exogenous(self, rng, count):
        return np.exp(self.log_mean + self.log_std * rng.standard_normal((count, self.log_mean.size)))

    def draw(self, rng):
        A, B, c = self.draw_batch(rng, 1)
        return A[0], B[0], c[0]

    def draw_batch(self, rng, count):
        c = np.zeros((count, self.A.shape[0]))
        c[:, self.warehouses:] = self.exogenous(rng, count)
        return (np.broadcast_to(self.A, (count,) + self.A.shape).copy(),
                np.broadcast_to(self.B, (count,) + self.B.shape).copy(), c)


class SupplyChainInitialState(InitialStateDistribution):
    """Stock uniform on [0, h_max], prices and demands from their distributions."""

    def __init__(self, sampler, h_max):
        self.sampler = sampler
        self.h_max = np.asarray(h_max, dtype=float)

    def sample(self, rng):
        stock = rng.uniform(0.0, self.h_max)
        return np.concatenate([stock, self.sampler.exogenous(rng, 1)[0]])


def make_supply_chain(params=None, seed=0):
    """
    Single-good supply chain with state (stock, prices, demands) and input
    (buys, sales, transports). Stage cost

        -r^T s + p^T b + tau^T z + alpha^T h + sum_i beta_i h_i^2

    subject to 0 <= h + (A_in - A_out) u <= h_max, 0 <= u <= u_max,
    A_out u <= h and s <= d. Prices and demands are exogenous. V^1 is the
    certainty-equivalent LQR bound with the input constraints replaced by
    u^T u - u_max^T u.
    """
    params = params or SupplyChainParams()
    w, ns, nc = params.warehouses, params.suppliers, params.consumers
    n, m = params.state_dim, params.links
    A_in, A_out = params.incidence()
    D = A_in - A_out
    h_max = _broadcast(params.h_max, w)
    u_max = _broadcast(params.u_max, m)

    sampler = SupplyChainSampler(params)
    dynamics = DynamicsModel(moments_from_samples(sampler, params.moment_samples, params.moment_seed),
                             sampler)

    Qxx = np.zeros((n, n))
    Qxx[:w, :w] = np.diag(_broadcast(params.holding_quadratic, w))
    Qxu = np.zeros((n, m))
    Qxu[w + np.arange(ns), np.arange(ns)] = 0.5
    qx = np.concatenate([_broadcast(params.holding_linear, w), np.zeros(ns + nc)])
    qu = np.concatenate([np.zeros(ns), -_broadcast(params.retail_price, nc),
                         _broadcast(params.transport_cost, m - ns - nc)])

    stock = np.hstack([np.eye(w), np.zeros((w, ns + nc))])
    demand = np.hstack([np.zeros((nc, w + ns)), np.eye(nc)])
    sales = np.zeros((nc, m))
    sales[np.arange(nc), ns + np.arange(nc)] = 1.0
    rows = [
        np.hstack([stock, D]),
        np.hstack([-stock, -D]),
        np.hstack([np.zeros((m, n)), np.eye(m)]),
        np.hstack([np.zeros((m, n)), -np.eye(m)]),
        np.hstack([-stock, A_out]),
        np.hstack([-demand, sales]),
    ]
    rhs = [h_max, np.zeros(w), u_max, np.zeros(m), np.zeros(w), np.zeros(nc)]
    cost = StageCost(n, m, Qxx=Qxx, Qxu=Qxu, qx=qx, qu=qu,
                     ineq_matrix=np.vstack(rows), ineq_rhs=np.concatenate(rhs),
                     exogenous=tuple(range(w, n)))
    prob = ControlProblem(n, m, dynamics, cost, params.gamma, SupplyChainInitialState(sampler, h_max),
                          name='supply-chain', seed=seed, params=params.to_dict())
    return prob, ce_lqr_lower_bound(prob, supply_chain_relaxation(params))


def supply_chain_relaxation(params=None):
    """Drop all constraints and add u^T u - u_max^T u, which is <= 0 on [0, u_max]."""
    params = params or SupplyChainParams()
    return RelaxationSpec(True, True, 1.0, tuple(-_broadcast(params.u_max, params.links)))


def input_box_relaxation(params=None):
    """Drop the input constraints; the stage cost is already strictly convex in u."""
    return RelaxationSpec()


@dataclass(frozen=True)
class ProblemEntry:
    build: object
    params: type
    relaxation: object


PROBLEMS = {
    'box-lqr': ProblemEntry(make_box_lqr, BoxLqrParams, input_box_relaxation),
    'commitments': ProblemEntry(make_commitments, CommitmentsParams, input_box_relaxation),
    'supply-chain': ProblemEntry(make_supply_chain, SupplyChainParams, supply_chain_relaxation),
}


def _entry(name):
    if name not in PROBLEMS:
        raise ValueError(f"Unknown problem '{name}', expected one of {sorted(PROBLEMS)}")
    return PROBLEMS[name]


def parse_params(name, params=None):
    entry = _entry(name)
    if params is None:
        return entry.params()
    if isinstance(params, dict):
        return entry.params.from_dict(params)
    return params


def build_problem(name, params=None, seed=0):
    """
    Build a registered benchmark.

    Args:
        name: 'box-lqr', 'commitments' or 'supply-chain'
        params: Parameter struct, dict of overrides, or None for the defaults
        seed: Generator seed

    Returns:
        Tuple (ControlProblem, V^1)
    """
    params = parse_params(name, params)
    logger.info(f"Building problem {name} with seed {seed}")
    return _entry(name).build(params, seed)


def default_relaxation(prob):
    """Relaxation used for the lower bound of a generated problem."""
    if prob.name not in PROBLEMS:
        return RelaxationSpec()
    return _entry(prob.name).relaxation(parse_params(prob.name, prob.params))


def problem_to_dict(prob):
    """JSON-ready description; registered problems can be rebuilt from it."""
    return {
        'name': prob.name,
        'n': prob.n,
        'm': prob.m,
        'gamma': prob.gamma,
        'seed': prob.seed,
        'params': prob.params,
        'cost': prob.cost.to_dict(),
        'moments': prob.dynamics.moments.to_dict(),
    }


def load_problem(data):
    """Rebuild a registered problem from `problem_to_dict` output."""
    try:
        name = data['name']
        seed = data.get('seed', 0)
        params = data.get('params') or None
    except (KeyError, TypeError, AttributeError) as e:
        raise ValueError(f"Malformed problem description: {e}") from e
    prob, V1 = build_problem(name, params, seed)
    if (prob.n, prob.m) != (data.get('n', prob.n), data.get('m', prob.m)):
        raise ValueError("Problem dimensions do not match the rebuilt problem")
    return prob, V1
