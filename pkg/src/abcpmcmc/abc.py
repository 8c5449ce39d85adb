"""Likelihood-free approximation: ABC rejection and sequential ABC.

Distances are Euclidean over every observed, non-missing data entry of all
replicates. Parameters live in sampling coordinates (``log(theta)`` for
log-scale priors). Each proposal draws from its own substream keyed by
``(generation, proposal index)``, so populations do not depend on the
number of workers.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .ssa import (
    MAX_EVENTS,
    STATUS_BAD_HAZARD,
    STATUS_EXPLODED,
    STATUS_OK,
    HazardError,
    _abc_distance,
    _kernel_args,
)
from .streams import STAGE_ABC, check_seed, substream

logger = logging.getLogger(__name__)

BATCH_SIZE = 64
MAX_PRIOR_RETRIES = 10_000


class ABCBudgetError(RuntimeError):
    """Proposal budget exhausted before the population was complete."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class DegeneratePopulationError(ValueError):
    """Population too collapsed for a usable covariance."""


@dataclass
class WeightedPopulation:
    """Weighted ABC particles in sampling coordinates."""

    particles: np.ndarray
    weights: np.ndarray
    distances: np.ndarray
    tolerance: float
    generation: int = 0
    n_proposals: int = 0
    names: tuple = ()
    kernel_cov: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        self.distances = np.asarray(self.distances, dtype=float)
        self.names = tuple(self.names) or tuple(f"p{i}" for i in range(self.particles.shape[1]))

    def __len__(self):
        return self.particles.shape[0]

    @property
    def dim(self):
        return self.particles.shape[1]

    def check(self):
        """Raise ``AssertionError`` if the population invariants fail."""
        n = len(self)
        assert self.weights.shape == (n,) and self.distances.shape == (n,)
        assert np.all(self.weights >= 0), "negative weight"
        assert abs(self.weights.sum() - 1.0) <= 1e-12, "weights do not sum to one"
        assert np.all(self.distances <= self.tolerance), "distance above tolerance"

    def mean(self):
        return self.weights @ self.particles

    def cov(self):
        """Weighted (biased) sample covariance."""
        c = self.particles - self.mean()
        return (self.weights[:, None] * c).T @ c

    def draw(self, rng, size):
        """Indices drawn by weight (inverse CDF on the cumulative weights)."""
        return _inverse_cdf(np.cumsum(self.weights), rng.random(size))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*self.names, "weight", "distance"])
            for z, wt, d in zip(self.particles, self.weights, self.distances):
                w.writerow([*(repr(float(v)) for v in z), repr(float(wt)), repr(float(d))])

    @classmethod
    def from_csv(cls, path, tolerance=None, generation=0):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        if data.ndim != 2 or header[-2:] != ["weight", "distance"]:
            raise ValueError(f"{path}: not a population file")
        dist = data[:, -1]
        return cls(
            data[:, :-2],
            data[:, -2],
            dist,
            float(dist.max()) if tolerance is None else tolerance,
            generation,
            names=tuple(header[:-2]),
        )


def _inverse_cdf(cumw, u):
    total = cumw[-1]
    idx = np.searchsorted(cumw, np.asarray(u) * total, side="right")
    return np.minimum(idx, len(cumw) - 1)


def distance(D, D_star, obs=None):
    """Euclidean distance over all observed, non-missing entries of ``D``.

    ``D_star=None`` stands for an exploded simulation and gives ``inf``.
    """
    if D_star is None:
        return math.inf
    a = np.asarray(getattr(D, "values", D), dtype=float)
    b = np.asarray(getattr(D_star, "values", D_star), dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"datasets differ in shape: {a.shape} vs {b.shape}")
    if hasattr(D, "times") and hasattr(D_star, "times") and not np.array_equal(D.times, D_star.times):
        raise ValueError("datasets differ in observation times")
    sel = ~np.isnan(a)
    if obs is not None:
        sel &= obs.mask
    diff = a[sel] - b[sel]
    if np.any(np.isnan(diff)):
        raise ValueError("simulated data is missing entries that are observed")
    return float(np.sqrt(np.sum(diff * diff)))


def adaptive_epsilon(distances, q):
    """Lower empirical ``q``-quantile: the ``ceil(q M)``-th smallest distance."""
    d = np.sort(np.asarray(distances, dtype=float))
    if d.size == 0:
        raise ValueError("no distances given")
    if not 0 < q <= 1:
        raise ValueError(f"quantile must lie in (0, 1], got {q}")
    finite = d[np.isfinite(d)]
    if finite.size == 0:
        raise ValueError("all distances are infinite")
    k = max(1, math.ceil(round(q * d.size, 9)))
    eps = d[k - 1]
    return float(eps) if np.isfinite(eps) else float(finite[-1])


def optimal_kernel_cov(prev_particles, prev_weights, sub_particles, sub_weights):
    """Weighted cross-population scatter of the optimal random-walk kernel.

    Equals ``sum_i sum_k w_i w~_k (z~_k - z_i)(z~_k - z_i)'`` for normalised
    weights, evaluated in its centred form about the previous mean.
    """
    prev = np.atleast_2d(np.asarray(prev_particles, dtype=float))
    sub = np.atleast_2d(np.asarray(sub_particles, dtype=float))
    w = np.asarray(prev_weights, dtype=float)
    ws = np.asarray(sub_weights, dtype=float)
    if prev.shape[1] != sub.shape[1]:
        raise ValueError("populations differ in dimension")
    if sub.shape[0] == 0:
        raise ValueError("empty subset")
    w = w / w.sum()
    ws = ws / ws.sum()
    m = w @ prev
    cp = prev - m
    cs = sub - m
    cov = (w[:, None] * cp).T @ cp + (ws[:, None] * cs).T @ cs
    return 0.5 * (cov + cov.T)


def regularize_cov(cov):
    """Cholesky factor of ``cov``, adding ``1e-10 * trace / d`` to the diagonal if needed."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        return cov, np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[0]
    jitter = 1e-10 * np.trace(cov) / d
    if not jitter > 0:
        raise DegeneratePopulationError("covariance is zero; population has collapsed")
    cov = cov + jitter * np.eye(d)
    try:
        return cov, np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise DegeneratePopulationError("covariance is not positive definite after regularization") from None


def _mvn_logpdf(diff, chol):
    """log N(diff; 0, L L') for each row of ``diff``."""
    d = chol.shape[0]
    sol = np.linalg.solve(chol, diff.T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (np.sum(sol * sol, axis=0) + d * math.log(2 * math.pi) + logdet)


def _log_smc_weights(Z, prior, prev, chol):
    free = prior.free
    log_prior = np.array([prior.log_density(z) for z in Z])
    log_w_prev = np.log(prev.weights)
    out = np.empty(len(Z))
    for i, z in enumerate(Z):
        diff = z[free] - prev.particles[:, free]
        denom = logsumexp(log_w_prev + _mvn_logpdf(diff, chol))
        if denom == -np.inf:
            raise ValueError(f"kernel density of every previous particle underflows at particle {i} ({z.tolist()})")
        out[i] = log_prior[i] - denom
    return out


def smc_weight(theta, prior, prev, cov, generation=None):
    """Unnormalised importance weight of an accepted particle.

    ``1`` for generation 0 (``prev is None``), otherwise the prior density over
    the weighted mixture of Gaussian kernels centred at the previous particles.
    ``cov`` covers the free (non point-mass) coordinates.
    """
    if prev is None or generation == 0:
        return 1.0
    _, chol = regularize_cov(cov)
    z = np.asarray(theta, dtype=float)
    return float(np.exp(_log_smc_weights(z[None, :], prior, prev, chol)[0]))


class _Simulator:
    """Draws noisy data for a parameter vector and returns its distance to ``D``."""

    def __init__(self, model, prior, obs, D, max_events=MAX_EVENTS):
        if model.init is None:
            raise ValueError("model has no initial-state prior")
        self.model = model
        self.prior = prior
        self.obs = obs
        self.data = np.ascontiguousarray(D.values)
        self.times = np.ascontiguousarray(D.times)
        self.first_rows = [D.values[r, 0] for r in range(D.n_replicates)]
        self.max_events = int(max_events)
        self.kargs = _kernel_args(model.kernel)
        self.stack_size = model.kernel.stack_size
        self.sigma = np.ascontiguousarray(obs.sigma, dtype=float)
        self.mask = np.ascontiguousarray(obs.mask)

    def __call__(self, z, rng, eps):
        theta = self.prior.to_natural(z)
        X0 = np.vstack([self.model.init.sample(rng, 1, observed=row) for row in self.first_rows])
        eps2 = eps * eps if np.isfinite(eps) else math.inf
        d2, status = _abc_distance(
            X0, self.times[0], self.times, self.data, self.obs.code, self.sigma, self.mask,
            theta, *self.kargs, self.stack_size, rng, self.max_events, eps2,
        )
        if status == STATUS_OK:
            return math.sqrt(d2)
        if status == STATUS_BAD_HAZARD:
            raise HazardError(f"hazard evaluated negative or non-finite at theta={theta.tolist()}")
        if status == STATUS_EXPLODED:
            logger.debug("simulation exploded at theta=%s", theta.tolist())
        return math.inf


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _collect(propose, eps, n_accept, seed, generation, max_proposals, workers, batch_size, pre=()):
    """Evaluate proposals in index order until ``n_accept`` have ``d < eps``.

    ``pre`` holds already-evaluated ``(z, d)`` pairs for the first indices.
    An infinite ``eps`` accepts everything, exploded simulations included,
    so that the population is an exact prior sample.
    Returns accepted ``(Z, distances)`` and the number of proposals consumed.
    """
    Z, dist = [], []
    index = 0

    def consider(results):
        nonlocal index
        for z, d in results:
            index += 1
            if d < eps or eps == math.inf:
                Z.append(z)
                dist.append(d)
                if len(Z) == n_accept:
                    return True
        return False

    if consider(pre):
        return np.array(Z), np.array(dist), index
    while True:
        if index >= max_proposals:
            partial = (np.array(Z), np.array(dist))
            raise ABCBudgetError(
                f"generation {generation}: {len(Z)} of {n_accept} accepted after {index} proposals",
                partial=partial,
            )
        stop = min(index + batch_size, max_proposals)
        batch = _map(lambda i: propose(substream(seed, STAGE_ABC, generation, i), eps), range(index, stop), workers)
        if consider(batch):
            return np.array(Z), np.array(dist), index


def _prior_proposer(simulate, prior):
    def propose(rng, eps):
        z = prior.sample(rng)
        return z, simulate(z, rng, eps)

    return propose


def abc_rejection(model, prior, obs, D, eps, n_accept, seed, max_proposals=10**6, workers=1,
                  batch_size=BATCH_SIZE, max_events=MAX_EVENTS, generation=0, _pre=()):
    """Rejection ABC: prior draws accepted when their distance is below ``eps``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if n_accept < 1:
        raise ValueError("n_accept must be at least 1")
    seed = check_seed(seed)
    simulate = _Simulator(model, prior, obs, D, max_events)
    Z, dist, used = _collect(
        _prior_proposer(simulate, prior), eps, n_accept, seed, generation, max_proposals, workers, batch_size, _pre
    )
    pop = WeightedPopulation(
        Z, np.full(n_accept, 1.0 / n_accept), dist, float(eps), generation, used, prior.coordinate_names()
    )
    return pop


def abc_smc(model, prior, obs, D, n_generations, n_particles, q, seed, workers=1,
            max_proposals=10**6, batch_size=BATCH_SIZE, max_events=MAX_EVENTS):
    """Sequential ABC with adaptive quantile tolerances and the optimal kernel.

    Generation 0 is rejection ABC at the ``q``-quantile of a pilot batch of
    ``n_particles`` prior-predictive distances. Returns one population per
    generation.
    """
    if n_particles < 2:
        raise ValueError("n_particles must be at least 2")
    if n_generations < 1:
        raise ValueError("n_generations must be at least 1")
    if not 0 < q <= 1:
        raise ValueError(f"quantile must lie in (0, 1], got {q}")
    seed = check_seed(seed)
    simulate = _Simulator(model, prior, obs, D, max_events)

    prior_propose = _prior_proposer(simulate, prior)
    pilot = _map(
        lambda i: prior_propose(substream(seed, STAGE_ABC, 0, i), math.inf), range(n_particles), workers
    )
    eps = adaptive_epsilon([d for _, d in pilot], q)
    pop = abc_rejection(
        model, prior, obs, D, eps, n_particles, seed, max_proposals, workers, batch_size, max_events, 0, _pre=pilot
    )
    logger.info("generation 0: eps=%.6g, %d proposals", eps, pop.n_proposals)
    populations = [pop]
    free = prior.free
    for t in range(1, n_generations):
        prev = populations[-1]
        eps = adaptive_epsilon(prev.distances, q)
        keep = prev.distances <= eps
        cov = optimal_kernel_cov(
            prev.particles[:, free], prev.weights, prev.particles[keep][:, free], prev.weights[keep]
        )
        cov, chol = regularize_cov(cov)
        cumw = np.cumsum(prev.weights)

        def propose(rng, eps, prev=prev, chol=chol, cumw=cumw):
            for _ in range(MAX_PRIOR_RETRIES):
                j = _inverse_cdf(cumw, rng.random())
                z = prev.particles[j].copy()
                z[free] += chol @ rng.standard_normal(chol.shape[0])
                if prior.log_density(z) > -math.inf:
                    return z, simulate(z, rng, eps)
            raise DegeneratePopulationError("perturbed particles keep leaving the prior support")

        Z, dist, used = _collect(propose, eps, n_particles, seed, t, max_proposals, workers, batch_size)
        logw = _log_smc_weights(Z, prior, prev, chol)
        w = np.exp(logw - logsumexp(logw))
        w /= w.sum()
        pop = WeightedPopulation(Z, w, dist, float(eps), t, used, prior.coordinate_names(), kernel_cov=cov)
        logger.info("generation %d: eps=%.6g, %d proposals", t, eps, used)
        populations.append(pop)
    return populations
