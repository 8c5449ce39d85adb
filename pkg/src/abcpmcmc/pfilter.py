"""Bootstrap particle filter for marginal-likelihood estimation."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .observation import _check_poisson_data, log_obs_density_many
from .ssa import MAX_EVENTS, STATUS_BAD_HAZARD, STATUS_EXPLODED, HazardError, _kernel_args, _propagate


@dataclass
class ParticleSet:
    """Particles after weighting at one observation time."""

    states: np.ndarray
    weights: np.ndarray
    time: float
    log_weight_sum: float


@dataclass
class LikEstimate:
    """Log marginal-likelihood estimate with its per-observation increments."""

    log_estimate: float
    increments: np.ndarray
    n_particles: int
    degenerate: bool = False
    history: list = field(default_factory=list, repr=False)


def _sum_increments(increments):
    total = 0.0
    for inc in increments:
        total += inc
    return total


def _resample(weights, rng):
    """Multinomial resampling via inverse CDF on sorted uniforms."""
    n = weights.size
    cumw = np.cumsum(weights)
    u = np.sort(rng.random(n)) * cumw[-1]
    return np.minimum(np.searchsorted(cumw, u, side="right"), n - 1)


def _validate_data(obs, values):
    if obs.kind == "poisson":
        d = values[:, obs.mask]
        _check_poisson_data(d[~np.isnan(d)])


def bootstrap_filter(model, theta, x0_prior, obs, D, n_particles, rng, max_events=MAX_EVENTS, keep_history=False):
    """Estimate ``log p(D | theta)`` for a single replicate.

    Particles start from ``x0_prior`` at ``D.times[0]``; at every observation
    time they are resampled by weight, propagated with the direct method and
    reweighted by the observation density. ``theta`` is on the natural scale.
    A step where every weight is zero ends the run with ``-inf``.
    """
    if n_particles < 1:
        raise ValueError("n_particles must be at least 1")
    if D.n_replicates != 1:
        raise ValueError("bootstrap_filter takes a single replicate; use replicate_log_lik")
    values = D.values[0]
    times = D.times
    _validate_data(obs, values)
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    kern = model.kernel
    kargs = _kernel_args(kern)
    N = int(n_particles)
    log_n = math.log(N)

    X = np.ascontiguousarray(x0_prior.sample(rng, N, observed=values[0]), dtype=np.int64)
    events = np.zeros(N, dtype=np.int64)
    status = np.zeros(N, dtype=np.int64)
    weights = None
    t = times[0]
    increments = []
    history = []
    for k, tk in enumerate(times):
        if tk > t:
            if weights is not None:
                idx = _resample(weights, rng)
                X = X[idx]
                events = events[idx]
            _propagate(X, events, t, tk, theta, *kargs, kern.stack_size, rng, int(max_events), status)
            if np.any(status == STATUS_BAD_HAZARD):
                raise HazardError(f"hazard evaluated negative or non-finite at theta={theta.tolist()}")
            t = tk
        logw = log_obs_density_many(obs, values[k], X)
        if np.any(status == STATUS_EXPLODED):
            logw[status == STATUS_EXPLODED] = -np.inf
        lse = logsumexp(logw)
        if lse == -np.inf:
            increments.append(-math.inf)
            return LikEstimate(-math.inf, np.array(increments), N, True, history)
        increments.append(lse - log_n)
        weights = np.exp(logw - lse)
        if keep_history:
            history.append(ParticleSet(X.copy(), weights.copy(), float(tk), float(lse)))
    increments = np.array(increments)
    return LikEstimate(_sum_increments(increments), increments, N, False, history)


def replicate_log_lik(model, theta, x0_prior, obs, D, n_particles, rng, max_events=MAX_EVENTS):
    """Sum of independent per-replicate log estimates (replicates share the stream in turn)."""
    if D.n_replicates < 1:
        raise ValueError("dataset has no replicates")
    if D.n_replicates == 1:
        return bootstrap_filter(model, theta, x0_prior, obs, D, n_particles, rng, max_events)
    parts = []
    for rep in D.replicates():
        est = bootstrap_filter(model, theta, x0_prior, obs, rep, n_particles, rng, max_events)
        parts.append(est)
        if est.degenerate:
            break
    increments = np.concatenate([p.increments for p in parts])
    degenerate = any(p.degenerate for p in parts)
    total = -math.inf if degenerate else _sum_increments(p.log_estimate for p in parts)
    return LikEstimate(total, increments, int(n_particles), degenerate)


def loglik_variance(model, theta, x0_prior, obs, D, n_particles, repeats, rng, max_events=MAX_EVENTS):
    """Sample variance of ``repeats`` independent log-likelihood estimates.

    Any ``-inf`` estimate makes the variance ``inf``.
    """
    if repeats < 2:
        raise ValueError("at least two repeats are needed for a variance")
    ests = np.array(
        [replicate_log_lik(model, theta, x0_prior, obs, D, n_particles, rng, max_events).log_estimate for _ in range(repeats)]
    )
    if np.any(~np.isfinite(ests)):
        return math.inf
    return float(np.var(ests, ddof=1))
