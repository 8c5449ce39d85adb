"""Pseudo-marginal random-walk Metropolis-Hastings and the hybrid pipeline.

The likelihood inside the acceptance ratio is the bootstrap-filter estimate.
Because that estimate is unbiased, the chain still targets the exact
posterior as long as the estimate attached to the current point is kept
until the next acceptance. The hybrid pipeline uses a sequential ABC run to
choose starting points, the proposal covariance and the particle count.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .abc import DegeneratePopulationError, WeightedPopulation, abc_smc, regularize_cov
from .pfilter import loglik_variance, replicate_log_lik
from .ssa import MAX_EVENTS
from .streams import STAGE_CHAIN, STAGE_INIT, STAGE_TUNE, check_seed, substream

logger = logging.getLogger(__name__)

OPTIMAL_RW_SCALE = 2.38**2
DEFAULT_VARIANCE_TARGET = 2.0
VARIANCE_BAND = (1.0, 3.0)
TUNE_REPEATS = 50
REFINE_PROBES = 3
MAX_GROWTH = 8


class ParticleTuningError(RuntimeError):
    """The particle count needed for a usable likelihood estimate exceeds the cap."""


@dataclass(frozen=True, eq=False)
class ChainConfig:
    """Settings of one pseudo-marginal chain.

    ``proposal_cov`` acts on the free coordinates of the sampling vector
    (``log(theta)`` for log-scale priors). ``theta0`` is a full vector in
    sampling coordinates. ``burn_in`` iterations run before the ``n_iterations``
    recorded ones and are discarded.
    """

    proposal_cov: np.ndarray
    n_particles: int
    n_iterations: int
    theta0: np.ndarray
    seed: int
    thin: int = 1
    chain: int = 0
    burn_in: int = 0
    max_events: int = MAX_EVENTS
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.proposal_cov, dtype=float))
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("proposal_cov must be a square matrix")
        if not np.all(np.isfinite(cov)) or not np.allclose(cov, cov.T, rtol=1e-12, atol=0.0):
            raise ValueError("proposal_cov must be finite and symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("proposal_cov must be positive definite") from None
        for name in ("n_particles", "n_iterations", "thin"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        if int(self.burn_in) < 0:
            raise ValueError("burn_in must be non-negative")
        object.__setattr__(self, "proposal_cov", cov)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "theta0", np.array(self.theta0, dtype=float).reshape(-1))
        object.__setattr__(self, "seed", check_seed(self.seed))

    @property
    def dim(self):
        return self.proposal_cov.shape[0]


@dataclass
class ChainRecord:
    """Retained output of one chain.

    ``samples`` are in sampling coordinates; ``iterations`` are 1-based
    indices of the retained iterations (burn-in excluded) and ``accepted``
    tells whether the proposal at that iteration was accepted.
    """

    samples: np.ndarray
    log_lik: np.ndarray
    accepted: np.ndarray
    iterations: np.ndarray
    n_accepted: int
    n_iterations: int
    names: tuple = ()
    burn_in: int = 0
    chain: int = 0
    seed: int = None
    error: str = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        self.samples = samples.reshape(len(self.log_lik), samples.shape[-1] if samples.ndim == 2 else -1)
        self.log_lik = np.asarray(self.log_lik, dtype=float)
        self.accepted = np.asarray(self.accepted, dtype=bool)
        self.iterations = np.asarray(self.iterations, dtype=np.int64)
        self.names = tuple(self.names) or tuple(f"p{i}" for i in range(self.samples.shape[1]))
        if self.n_accepted > self.n_iterations + self.burn_in:
            raise ValueError("acceptance count exceeds the number of iterations")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def failed(self):
        return self.error is not None

    @property
    def acceptance_rate(self):
        total = self.n_iterations + self.burn_in
        return self.n_accepted / total if total else math.nan

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", *self.names, "log_lik", "accepted"])
            for it, z, ll, acc in zip(self.iterations, self.samples, self.log_lik, self.accepted):
                w.writerow([int(it), *(repr(float(v)) for v in z), repr(float(ll)), int(acc)])

    @classmethod
    def from_csv(cls, path, chain=0):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        if header[0] != "iteration" or header[-2:] != ["log_lik", "accepted"]:
            raise ValueError(f"{path}: not a chain file")
        body = rows[1:]
        iterations = np.array([int(r[0]) for r in body], dtype=np.int64)
        samples = np.array([[float(v) for v in r[1:-2]] for r in body]).reshape(len(body), len(header) - 3)
        log_lik = np.array([float(r[-2]) for r in body])
        accepted = np.array([r[-1] == "1" for r in body])
        n_iter = int(iterations[-1]) if len(body) else 0
        return cls(samples, log_lik, accepted, iterations, int(accepted.sum()), n_iter, tuple(header[1:-2]), chain=chain)


@dataclass
class TuningResult:
    """Particle count chosen by :func:`tune_particles` and the probes that led to it."""

    n_particles: int
    trace: list

    @property
    def variance(self):
        for n, var in reversed(self.trace):
            if n == self.n_particles:
                return var
        return math.nan


@dataclass
class HybridResult:
    """Everything produced by :func:`hybrid_run`."""

    chains: list
    populations: list
    proposal_cov: np.ndarray
    tuning: TuningResult
    theta0: np.ndarray
    seed: int

    @property
    def population(self):
        return self.populations[-1]

    @property
    def n_particles(self):
        return self.tuning.n_particles

    @property
    def failures(self):
        return [c for c in self.chains if c.failed]


def proposal_cov_from_abc(population, d=None):
    """Random-walk covariance ``2.38**2 / d`` times the weighted population covariance.

    Parameters
    ----------
    population : WeightedPopulation
        Final ABC population, restricted to the free coordinates.
    d : int, optional
        Dimension; defaults to the population dimension.

    Raises
    ------
    DegeneratePopulationError
        Fewer than ``d + 1`` distinct particles, or a covariance that stays
        singular after regularization.
    """
    d = population.dim if d is None else int(d)
    if d != population.dim:
        raise ValueError(f"dimension {d} does not match the population ({population.dim})")
    n_distinct = np.unique(population.particles[population.weights > 0], axis=0).shape[0]
    if n_distinct < d + 1:
        raise DegeneratePopulationError(f"population has {n_distinct} distinct particles; need at least {d + 1}")
    cov = OPTIMAL_RW_SCALE / d * population.cov()
    cov = 0.5 * (cov + cov.T)
    cov, chol = regularize_cov(cov)
    if np.linalg.matrix_rank(cov) < d:
        raise DegeneratePopulationError("proposal covariance is rank deficient")
    return cov


def next_particle_count(n, variance, target=DEFAULT_VARIANCE_TARGET):
    """Next probe when the variance is too high.

    The ``1/N`` extrapolation, clipped to between ``2n`` and
    ``MAX_GROWTH * n``: far from the posterior the variance falls faster
    than ``1/N`` and the raw extrapolation overshoots by orders of magnitude.
    """
    if not np.isfinite(variance):
        return MAX_GROWTH * n
    return min(MAX_GROWTH * n, max(2 * n, math.ceil(n * variance / target)))


def tune_particles(model, theta, x0_prior, obs, D, rng, target=DEFAULT_VARIANCE_TARGET, n_min=10, n_max=20_000,
                   repeats=TUNE_REPEATS, max_events=MAX_EVENTS):
    """Choose the particle count so that the log-likelihood variance is about ``target``.

    The variance of the log estimate at ``theta`` (natural scale) is measured
    with ``repeats`` filter runs. Starting at ``n_min`` the count grows until
    the variance is at most ``target``. A variance below the lower end of the
    ``[1, 3]`` band starts a downward search of at most ``REFINE_PROBES``
    probes, first along ``var ~ 1/N`` and then by geometric bisection; the
    cheapest probed count with variance at most 3 is kept.

    Returns
    -------
    TuningResult
    """
    if not target > 0:
        raise ValueError("target must be positive")
    if not 1 <= n_min <= n_max:
        raise ValueError("need 1 <= n_min <= n_max")
    trace = []

    def probe(n):
        var = loglik_variance(model, theta, x0_prior, obs, D, n, repeats, rng, max_events)
        trace.append((int(n), float(var)))
        logger.info("tuning: N=%d var=%.4g", n, var)
        return var

    n = int(n_min)
    lo = None
    var = probe(n)
    while var > target:
        nxt = next_particle_count(n, var, target)
        if nxt > n_max:
            raise ParticleTuningError(
                f"log-likelihood variance {var:.3g} at N={n} would need more than {n_max} particles; "
                "check the model, the observation error and the data"
            )
        lo, n = n, nxt
        var = probe(n)
    # Overshoot: search downwards in log N between a count known to be too
    # noisy (lo) and the cheapest count known to be quiet enough (n).
    cand = max(int(n_min), math.ceil(n * var / target))
    for _ in range(REFINE_PROBES):
        if lo is not None and cand <= lo:
            cand = math.ceil(math.sqrt(lo * n))
        if var >= VARIANCE_BAND[0] or cand >= n or (lo is not None and cand <= lo):
            break
        v = probe(cand)
        if v <= VARIANCE_BAND[1]:
            n, var = cand, v
            cand = max(int(n_min), math.ceil(n * var / target))
        else:
            lo = cand
            cand = math.ceil(math.sqrt(lo * n))
    return TuningResult(int(n), trace)


def log_acceptance_ratio(log_lik, log_prior, log_lik_prop, log_prior_prop):
    """Log Metropolis-Hastings ratio for a symmetric proposal.

    ``-inf`` for an impossible proposal and ``+inf`` when the current point
    has a zero likelihood estimate but the proposal does not.
    """
    if log_lik_prop == -math.inf or log_prior_prop == -math.inf:
        return -math.inf
    if log_lik == -math.inf or log_prior == -math.inf:
        return math.inf
    return (log_lik_prop + log_prior_prop) - (log_lik + log_prior)


def proposal_log_density(z_to, z_from, cov):
    """Log density of the Gaussian random walk from ``z_from`` to ``z_to``."""
    diff = np.asarray(z_to, dtype=float) - np.asarray(z_from, dtype=float)
    chol = np.linalg.cholesky(np.atleast_2d(cov))
    y = np.linalg.solve(chol, diff)
    return float(-0.5 * y @ y - np.log(np.diag(chol)).sum() - 0.5 * diff.size * math.log(2 * math.pi))


def pmmh_step(current, config, model, prior, obs, D, rng, x0_prior=None):
    """One pseudo-marginal Metropolis-Hastings update.

    Parameters
    ----------
    current : tuple
        ``(z, log_lik)`` with ``z`` in sampling coordinates.

    Returns
    -------
    tuple
        ``(z, log_lik, accepted)``. On rejection the stored estimate of the
        current point is returned unchanged.
    """
    z, log_lik = current
    x0_prior = model.init if x0_prior is None else x0_prior
    free = prior.free
    z_prop = np.array(z, dtype=float)
    z_prop[free] += config.chol @ rng.standard_normal(config.dim)
    lp_prop = prior.log_density(z_prop)
    if lp_prop == -math.inf:
        return z, log_lik, False
    ll_prop = replicate_log_lik(
        model, prior.to_natural(z_prop), x0_prior, obs, D, config.n_particles, rng, config.max_events
    ).log_estimate
    log_alpha = log_acceptance_ratio(log_lik, prior.log_density(z), ll_prop, lp_prop)
    if log_alpha >= 0.0 or (log_alpha > -math.inf and math.log(rng.random()) < log_alpha):
        return z_prop, ll_prop, True
    return z, log_lik, False


def run_chain(config, model, prior, obs, D, x0_prior=None):
    """Run ``burn_in + n_iterations`` updates from ``config.theta0``.

    Iteration ``i`` (1-based, counted after burn-in) is retained when
    ``i % thin == 0``. The generator is the substream of
    ``(seed, chain)``, so a chain is reproducible on its own.
    """
    x0_prior = model.init if x0_prior is None else x0_prior
    if config.theta0.shape != (prior.dim,):
        raise ValueError(f"theta0 must have length {prior.dim}")
    if config.dim != int(prior.free.sum()):
        raise ValueError(f"proposal_cov must be {int(prior.free.sum())}x{int(prior.free.sum())}")
    if prior.log_density(config.theta0) == -math.inf:
        raise ValueError("theta0 lies outside the prior support")
    rng = substream(config.seed, STAGE_CHAIN, config.chain)
    z = config.theta0.copy()
    ll = replicate_log_lik(model, prior.to_natural(z), x0_prior, obs, D, config.n_particles, rng, config.max_events).log_estimate
    n_ret = config.n_iterations // config.thin
    samples = np.empty((n_ret, prior.dim))
    log_lik = np.empty(n_ret)
    accepted = np.zeros(n_ret, dtype=bool)
    iterations = np.empty(n_ret, dtype=np.int64)
    n_acc = 0
    j = 0
    for it in range(-config.burn_in + 1, config.n_iterations + 1):
        z, ll, acc = pmmh_step((z, ll), config, model, prior, obs, D, rng, x0_prior)
        n_acc += acc
        if it > 0 and it % config.thin == 0:
            samples[j] = z
            log_lik[j] = ll
            accepted[j] = acc
            iterations[j] = it
            j += 1
    return ChainRecord(
        samples, log_lik, accepted, iterations, n_acc, config.n_iterations,
        prior.coordinate_names(), config.burn_in, config.chain, config.seed,
    )


def _failed_record(config, prior, exc):
    return ChainRecord(
        np.empty((0, prior.dim)), np.empty(0), np.empty(0, dtype=bool), np.empty(0, dtype=np.int64), 0, 0,
        prior.coordinate_names(), chain=config.chain, seed=config.seed, error=f"{type(exc).__name__}: {exc}",
    )


def run_chains(configs, model, prior, obs, D, workers=1, x0_prior=None):
    """Run independent chains on a thread pool; a failing chain yields a record with ``error`` set."""

    def one(cfg):
        try:
            return run_chain(cfg, model, prior, obs, D, x0_prior)
        except Exception as exc:
            logger.error("chain %d failed: %s", cfg.chain, exc)
            return _failed_record(cfg, prior, exc)

    if workers <= 1 or len(configs) <= 1:
        return [one(c) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, configs))


def hybrid_run(model, prior, obs, D, n_chains, n_iterations, seed, *, abc_generations=5, abc_particles=1000,
               abc_quantile=0.3, abc_max_proposals=10**6, thin=1, burn_in=0, workers=1, target=DEFAULT_VARIANCE_TARGET,
               n_min=10, n_max=20_000, repeats=TUNE_REPEATS, max_events=MAX_EVENTS, populations=None):
    """ABC-SMC followed by parallel pseudo-marginal chains.

    The final ABC population supplies ``n_chains`` starting points (drawn by
    weight), the proposal covariance and, through its weighted mean, the
    point at which the particle count is tuned. Covariance and particle
    count are computed once and shared by all chains. Pass ``populations``
    to reuse an existing ABC run.
    """
    if n_chains < 1:
        raise ValueError("n_chains must be at least 1")
    seed = check_seed(seed)
    if populations is None:
        populations = abc_smc(
            model, prior, obs, D, abc_generations, abc_particles, abc_quantile, seed,
            workers=workers, max_proposals=abc_max_proposals, max_events=max_events,
        )
    final = populations[-1]
    free = prior.free
    sub = WeightedPopulation(final.particles[:, free], final.weights, final.distances, final.tolerance)
    cov = proposal_cov_from_abc(sub)
    theta_bar = prior.to_natural(final.mean())
    tuning = tune_particles(
        model, theta_bar, model.init, obs, D, substream(seed, STAGE_TUNE),
        target=target, n_min=n_min, n_max=n_max, repeats=repeats, max_events=max_events,
    )
    starts = final.particles[final.draw(substream(seed, STAGE_INIT), n_chains)]
    configs = [
        ChainConfig(cov, tuning.n_particles, n_iterations, starts[c], seed, thin, c, burn_in, max_events)
        for c in range(n_chains)
    ]
    chains = run_chains(configs, model, prior, obs, D, workers)
    return HybridResult(chains, populations, cov, tuning, starts, seed)
