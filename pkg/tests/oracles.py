"""Independent reference computations used as test oracles.

Nothing here imports the simulators or the particle filter; the exact
likelihoods come from dense matrix algebra on a truncated state space.
"""

import numpy as np
from scipy import stats
from scipy.linalg import expm
from scipy.special import logsumexp

IMMIGRATION_SOURCE = """\
species X = 0
param lam
reaction immigration: 0 -> X @ mass_action(lam)
prior log lam ~ uniform(-1, 4)
obs X ~ normal(2)
"""

IMMIGRATION_DEATH_SOURCE = """\
species X = poisson(4)
param lam
param mu
reaction immigration: 0 -> X @ mass_action(lam)
reaction death: X -> 0 @ mass_action(mu)
prior log lam ~ uniform(-3, 3)
prior log mu ~ uniform(-3, 3)
obs X ~ normal(1.5)
"""

ZERO_SOURCE = """\
species X = 50
param k
reaction decay: X -> 0 @ mass_action(k)
prior k ~ uniform(0, 1)
obs X ~ normal(10)
"""


def generator_matrix(lam, mu, M):
    """Rate matrix of the immigration-death process on ``{0..M}`` (immigration blocked at ``M``)."""
    Q = np.zeros((M + 1, M + 1))
    for x in range(M + 1):
        if x < M:
            Q[x, x + 1] = lam
        if x > 0:
            Q[x, x - 1] = mu * x
        Q[x, x] = -Q[x].sum()
    return Q


def forward_loglik(times, data, sigma, lam, mu, p0, M):
    """Exact ``log p(data)`` for the immigration-death model with gaussian noise.

    ``p0`` is the initial distribution on ``{0..M}``; ``data`` holds one
    observation per time (NaN for missing).
    """
    xs = np.arange(M + 1)
    log_alpha = np.log(np.maximum(p0, 1e-300))
    log_alpha[p0 == 0] = -np.inf
    prev_t = times[0]
    Q = generator_matrix(lam, mu, M)
    for t, d in zip(times, data):
        if t > prev_t:
            P = expm(Q * (t - prev_t))
            m = log_alpha.max()
            log_alpha = np.log(np.maximum(np.exp(log_alpha - m) @ P, 1e-300)) + m
            prev_t = t
        if not np.isnan(d):
            log_alpha = log_alpha + stats.norm.logpdf(d, loc=xs, scale=sigma)
    return float(logsumexp(log_alpha))


def immigration_loglik(times, data, sigma, lam, M=200):
    """Pure immigration from ``X0 = 0``: increments are Poisson, so transitions are exact pmfs."""
    xs = np.arange(M + 1)
    log_alpha = np.full(M + 1, -np.inf)
    log_alpha[0] = 0.0
    prev_t = times[0]
    for t, d in zip(times, data):
        if t > prev_t:
            inc = stats.poisson.pmf(xs, lam * (t - prev_t))
            # P[i, j] = pmf(j - i)
            P = np.zeros((M + 1, M + 1))
            for i in range(M + 1):
                P[i, i:] = inc[: M + 1 - i]
            m = log_alpha.max()
            log_alpha = np.log(np.maximum(np.exp(log_alpha - m) @ P, 1e-300)) + m
            prev_t = t
        if not np.isnan(d):
            log_alpha = log_alpha + stats.norm.logpdf(d, loc=xs, scale=sigma)
    return float(logsumexp(log_alpha))


def optimal_cov_bruteforce(prev, w, sub, wt):
    """Weighted cross-population scatter as an explicit double loop."""
    d = prev.shape[1]
    out = np.zeros((d, d))
    for i in range(prev.shape[0]):
        for k in range(sub.shape[0]):
            diff = sub[k] - prev[i]
            out += w[i] * wt[k] * np.outer(diff, diff)
    return out


def quadrature_posterior(log_lik, grid, log_prior):
    """Normalised posterior density on a uniform grid."""
    lp = np.array([log_lik(g) for g in grid]) + log_prior(grid)
    p = np.exp(lp - lp.max())
    return p / np.trapezoid(p, grid) if hasattr(np, "trapezoid") else p / np.trapz(p, grid)
