import math

import numpy as np
import pytest
from scipy import integrate, stats

from abcpmcmc.priors import (
    Exponential,
    Gamma,
    Geometric,
    InitialStatePrior,
    Observed,
    PointMass,
    Poisson,
    Shifted,
    Uniform,
)


@pytest.mark.parametrize(
    "dist, lo, hi",
    [(Uniform(-8, 8), -8, 8), (Gamma(19.36, 44), 0, 5), (Exponential(0.01), 0, np.inf), (Exponential(2.0), 0, np.inf)],
)
def test_continuous_densities_integrate_to_one(dist, lo, hi):
    total, _ = integrate.quad(lambda x: math.exp(dist.logpdf(x)), lo, hi, limit=200)
    assert total == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("dist", [Poisson(50), Geometric(0.03), Geometric(1.0), Poisson(0.0)])
def test_discrete_pmfs_sum_to_one(dist):
    total = sum(math.exp(dist.logpdf(k)) for k in range(5000))
    assert total == pytest.approx(1.0, abs=1e-10)


def test_log_densities_match_scipy():
    assert Gamma(2.5, 3.0).logpdf(0.7) == pytest.approx(stats.gamma(2.5, scale=1 / 3.0).logpdf(0.7))
    assert Poisson(4.0).logpdf(6) == pytest.approx(stats.poisson(4.0).logpmf(6))
    # failures before the first success
    assert Geometric(0.03).logpdf(5) == pytest.approx(stats.geom(0.03).logpmf(6))


@pytest.mark.parametrize(
    "dist, x",
    [(Uniform(0, 1), 1.5), (Gamma(2, 1), -1.0), (Exponential(1), -0.1), (Poisson(3), 2.5), (Poisson(3), -1),
     (Geometric(0.5), -2), (PointMass(3), 2)],
)
def test_outside_support_is_minus_inf(dist, x):
    assert dist.logpdf(x) == -math.inf


def test_sample_moments():
    rng = np.random.default_rng(0)
    for dist in (Gamma(19.36, 44), Geometric(0.03), Poisson(50)):
        xs = np.array([dist.sample(rng) for _ in range(20000)])
        se = math.sqrt(dist.var() / xs.size)
        assert abs(xs.mean() - dist.mean()) < 4 * se


def test_initial_state_shifted_on_observed():
    prior = InitialStatePrior(("N", "C"), [Observed(), Shifted("N", Geometric(0.03))])
    rng = np.random.default_rng(1)
    X = prior.sample(rng, 500, observed=np.array([28.0, np.nan]))
    assert np.all(X[:, 0] == 28)
    assert np.all(X[:, 1] >= 28)
    with pytest.raises(ValueError, match="observed"):
        prior.sample(rng, 1)


def test_initial_state_cycle_rejected():
    with pytest.raises(ValueError, match="cyclic"):
        InitialStatePrior(("A", "B"), [Shifted("B", Poisson(1)), Shifted("A", Poisson(1))])


def test_prior_spec_coordinates(lv, gene):
    z = np.array([0.0, -5.3, -0.51])
    assert np.allclose(lv.prior.to_sampling(lv.prior.to_natural(z)), z)
    theta = np.array([0.44, 10, 0.52, 15, 0.4, 7, 3])
    assert np.array_equal(gene.prior.to_natural(theta), theta)
