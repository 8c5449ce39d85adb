"""Chain and population diagnostics.

Every table-producing function has a ``*_rows`` companion or returns rows
that :func:`write_table` turns into a CSV file ready for plotting.
"""

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .observation import corrupt
from .pmcmc import ChainRecord
from .ssa import MAX_EVENTS, SimulationExplosion, simulate_at_times
from .streams import STAGE_PREDICTIVE, substream

QUANTILES = (0.025, 0.5, 0.975)


@dataclass
class PooledPosterior:
    """Retained samples of several chains stacked row-wise, with chain labels."""

    samples: np.ndarray
    chain: np.ndarray
    names: tuple

    def __len__(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]

    def interval(self, level=0.95):
        """Central credible interval per parameter, shape ``(d, 2)``."""
        a = (1.0 - level) / 2.0
        return np.quantile(self.samples, [a, 1.0 - a], axis=0).T

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", *self.names])
            for c, z in zip(self.chain, self.samples):
                w.writerow([int(c), *(repr(float(v)) for v in z)])


def pool(chains):
    """Stack the retained samples of successful chains."""
    chains = [c for c in chains if not c.failed]
    if not chains:
        raise ValueError("no successful chains to pool")
    names = chains[0].names
    if any(c.names != names for c in chains):
        raise ValueError("chains have different parameter names")
    samples = np.vstack([c.samples for c in chains])
    labels = np.concatenate([np.full(len(c), c.chain, dtype=np.int64) for c in chains])
    return PooledPosterior(samples, labels, names)


def autocorrelation(series, max_lag):
    """Sample autocorrelation ``r_k = c_k / c_0`` for ``k = 0..max_lag``.

    ``c_k`` uses the divisor ``n``, the usual biased estimator.
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    if not 0 <= max_lag < n:
        raise ValueError("series must be longer than max_lag")
    x = x - x.mean()
    c0 = x @ x
    if c0 == 0.0:
        raise ValueError("series has zero variance")
    return np.array([x[: n - k] @ x[k:] / c0 for k in range(max_lag + 1)])


def thin(record, k):
    """Keep every ``k``-th retained sample of a chain, starting with the first."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if isinstance(record, ChainRecord):
        return replace(
            record,
            samples=record.samples[::k],
            log_lik=record.log_lik[::k],
            accepted=record.accepted[::k],
            iterations=record.iterations[::k],
        )
    return np.asarray(record)[::k]


def gelman_rubin(chains, index=0):
    """Potential scale reduction factor for one parameter.

    Parameters
    ----------
    chains : sequence
        At least two ``ChainRecord`` objects or 1-d arrays of equal length
        (at least 10).
    index : int
        Parameter column, used for ``ChainRecord`` input.

    Notes
    -----
    With ``W`` the mean within-chain variance and ``B / n`` the variance of
    the chain means, ``V = (n - 1) / n * W + (m + 1) / m * B / n`` and the
    statistic is ``sqrt(V / W)``.
    """
    if len(chains) < 2:
        raise ValueError("gelman_rubin needs at least two chains")
    x = np.array([c.samples[:, index] if isinstance(c, ChainRecord) else np.asarray(c, dtype=float) for c in chains])
    m, n = x.shape
    if n < 10:
        raise ValueError("chains must have at least 10 samples")
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    V = (n - 1) / n * W + (m + 1) / (m * n) * B
    return math.sqrt(V / W)


def _predict_one(model, obs, theta, x0_prior, times, rng, max_events, observed):
    x0 = x0_prior.sample(rng, 1, observed=observed)[0]
    states = simulate_at_times(model, theta, x0, times, rng, max_events=max_events)
    return np.array([corrupt(obs, s, rng) for s in states])


def posterior_predictive(model, obs, pooled, x0_prior, times, draws, seed, prior=None, workers=1,
                         max_events=MAX_EVENTS, observed=None):
    """Quantiles of replicated noisy data under posterior draws.

    Draw ``i`` uses row ``i * len(pooled) // draws`` of the pooled samples
    (converted to the natural scale with ``prior`` when given) and its own
    random substream. Exploded simulations are dropped and counted.
    ``observed`` is the first data row, needed by initial-state priors that
    condition on observed species.

    Returns
    -------
    dict
        ``quantiles`` of shape ``(T, 3, u)`` for the levels in
        :data:`QUANTILES` (NaN for unobserved species), ``n_used`` and
        ``n_exploded``.
    """
    if draws < 1:
        raise ValueError("draws must be at least 1")
    times = np.asarray(times, dtype=float)
    samples = pooled.samples if isinstance(pooled, PooledPosterior) else np.atleast_2d(pooled)
    rows = [i * samples.shape[0] // draws for i in range(draws)]

    def one(i):
        z = samples[rows[i]]
        theta = prior.to_natural(z) if prior is not None else z
        try:
            return _predict_one(model, obs, theta, x0_prior, times, substream(seed, STAGE_PREDICTIVE, i), max_events, observed)
        except SimulationExplosion:
            return None

    if workers <= 1:
        sims = [one(i) for i in range(draws)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            sims = list(ex.map(one, range(draws)))
    kept = [s for s in sims if s is not None]
    u = len(model.species_names)
    q = np.full((times.size, len(QUANTILES), u), np.nan)
    if kept:
        stack = np.stack(kept)
        for j in np.flatnonzero(obs.mask):
            q[:, :, j] = np.quantile(stack[:, :, j], QUANTILES, axis=0).T
    return {"times": times, "quantiles": q, "n_used": len(kept), "n_exploded": draws - len(kept)}


def predictive_rows(pred, species_names, obs):
    """Flatten :func:`posterior_predictive` output to ``time, species, q025, q50, q975`` rows."""
    rows = []
    for k, t in enumerate(pred["times"]):
        for j in np.flatnonzero(obs.mask):
            rows.append([float(t), species_names[j], *(float(v) for v in pred["quantiles"][k, :, j])])
    return ["time", "species", "q025", "q50", "q975"], rows


def band_coverage(pred, D, obs):
    """Fraction of observed data points inside the 2.5-97.5% predictive band."""
    q = pred["quantiles"]
    inside = total = 0
    for r in range(D.n_replicates):
        for j in np.flatnonzero(obs.mask):
            d = D.values[r, :, j]
            ok = ~np.isnan(d)
            inside += int(np.sum((d[ok] >= q[ok, 0, j]) & (d[ok] <= q[ok, 2, j])))
            total += int(ok.sum())
    return inside / total if total else math.nan


def weighted_ks(x, wx, y, wy):
    """Two-sample Kolmogorov-Smirnov statistic between weighted empirical CDFs."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    wx = np.full(x.size, 1.0 / x.size) if wx is None else np.asarray(wx, dtype=float) / np.sum(wx)
    wy = np.full(y.size, 1.0 / y.size) if wy is None else np.asarray(wy, dtype=float) / np.sum(wy)
    grid = np.union1d(x, y)
    ox, oy = np.argsort(x), np.argsort(y)
    Fx = np.concatenate([[0.0], np.cumsum(wx[ox])])[np.searchsorted(x[ox], grid, side="right")]
    Fy = np.concatenate([[0.0], np.cumsum(wy[oy])])[np.searchsorted(y[oy], grid, side="right")]
    return float(np.max(np.abs(Fx - Fy)))


def compare_abc_pmcmc(population, pooled):
    """Per-parameter weighted ABC and pooled pMCMC means, variances and KS distance.

    Returns a list of dicts, one per parameter, with keys ``parameter``,
    ``abc_mean``, ``abc_var``, ``pmcmc_mean``, ``pmcmc_var`` and ``ks``.
    """
    if len(population) == 0 or len(pooled) == 0:
        raise ValueError("both samples must be non-empty")
    if population.dim != pooled.dim:
        raise ValueError("population and pooled samples have different dimensions")
    w = population.weights / population.weights.sum()
    report = []
    for j, name in enumerate(pooled.names):
        a = population.particles[:, j]
        b = pooled.samples[:, j]
        am = float(w @ a)
        report.append({
            "parameter": name,
            "abc_mean": am,
            "abc_var": float(w @ (a - am) ** 2),
            "pmcmc_mean": float(b.mean()),
            "pmcmc_var": float(b.var()),
            "ks": weighted_ks(a, w, b, None),
        })
    return report


def speedup(N, b, n):
    """Speed-up of ``N`` parallel chains that each pay burn-in ``b`` to store ``n`` samples in total."""
    if N < 1 or b < 0 or n < 1:
        raise ValueError("need N >= 1, b >= 0 and n >= 1")
    # Same value as (b + n) / (b + n / N); one rounding, so b = 0 gives exactly N.
    return N * (b + n) / (N * b + n)


def write_table(path, header, rows):
    """Write ``rows`` under ``header`` as CSV; floats use ``repr`` for exact round trips."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
