import math

import numpy as np
import pytest
from scipy import stats

from abcpmcmc.abc import (
    ABCBudgetError,
    DegeneratePopulationError,
    WeightedPopulation,
    abc_rejection,
    abc_smc,
    adaptive_epsilon,
    distance,
    optimal_kernel_cov,
    regularize_cov,
    smc_weight,
)
from abcpmcmc.observation import Dataset, synthesize_dataset

from oracles import immigration_loglik, optimal_cov_bruteforce, quadrature_posterior


@pytest.fixture(scope="module")
def imm_data(immigration):
    return synthesize_dataset(immigration, [5.0], [0], immigration.obs, np.arange(6.0), np.random.default_rng(4))


def test_distance_hand_value():
    assert distance(np.zeros((1, 1, 2)), np.array([[[3.0, 4.0]]])) == 5.0


def test_distance_skips_missing_and_flags_explosion():
    D = Dataset([0, 1], np.array([[1.0, np.nan], [2.0, 2.0]]), ("X", "Y"))
    Ds = Dataset([0, 1], np.array([[1.0, 50.0], [5.0, 6.0]]), ("X", "Y"))
    assert distance(D, Ds) == 5.0
    assert distance(D, None) == math.inf


def test_adaptive_epsilon_lower_order_statistic():
    assert adaptive_epsilon(np.arange(1.0, 11.0), 0.3) == 3.0
    assert adaptive_epsilon([5.0, 1.0], 1.0) == 5.0
    assert adaptive_epsilon([2.0, math.inf, math.inf], 0.9) == 2.0
    with pytest.raises(ValueError):
        adaptive_epsilon([1.0], 0.0)


def test_optimal_cov_scalar_example():
    cov = optimal_kernel_cov(np.array([[0.0], [1.0], [2.0]]), np.ones(3), np.array([[1.0], [2.0]]), np.ones(2))
    assert cov[0, 0] == pytest.approx(7 / 6, abs=1e-14)


def test_optimal_cov_full_subset_is_twice_covariance():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(30, 3))
    w = np.ones(30)
    cov = optimal_kernel_cov(Z, w, Z, w)
    assert np.allclose(cov, 2 * np.cov(Z.T, bias=True), atol=1e-12)


def test_optimal_cov_matches_bruteforce_weighted():
    rng = np.random.default_rng(1)
    prev, sub = rng.normal(size=(12, 2)), rng.normal(size=(5, 2))
    w, ws = rng.random(12), rng.random(5)
    expected = optimal_cov_bruteforce(prev, w / w.sum(), sub, ws / ws.sum())
    assert np.allclose(optimal_kernel_cov(prev, w, sub, ws), expected, atol=1e-12)


def test_regularize_cov_handles_singular_and_zero():
    cov, chol = regularize_cov(np.ones((2, 2)))
    assert np.allclose(chol @ chol.T, cov)
    with pytest.raises(DegeneratePopulationError):
        regularize_cov(np.zeros((2, 2)))


def test_smc_weight_single_particle(zero_model):
    prev = WeightedPopulation(np.array([[0.0]]), np.array([1.0]), np.array([0.0]), 1.0)
    w = smc_weight(np.array([0.5]), zero_model.prior, prev, np.eye(1))
    assert w == pytest.approx(1 / stats.norm.pdf(0.5), rel=1e-12)
    assert w == pytest.approx(2.8404, abs=1e-4)
    assert smc_weight(np.array([0.5]), zero_model.prior, None, np.eye(1)) == 1.0


def test_rejection_respects_tolerance(immigration, imm_data):
    pop = abc_rejection(immigration, immigration.prior, immigration.obs, imm_data, 8.0, 50, seed=3)
    assert len(pop) == 50 and np.all(pop.distances < 8.0)
    assert pop.n_proposals >= 50
    pop.check()


def test_rejection_budget_error(immigration, imm_data):
    with pytest.raises(ABCBudgetError) as info:
        abc_rejection(immigration, immigration.prior, immigration.obs, imm_data, 1e-6, 10, seed=3, max_proposals=100)
    Z, _ = info.value.partial
    assert len(Z) < 10


def test_infinite_tolerance_accepts_every_proposal(immigration, imm_data):
    pop = abc_rejection(immigration, immigration.prior, immigration.obs, imm_data, math.inf, 40, seed=9)
    assert pop.n_proposals == 40


def test_smc_tolerances_decrease_and_concentrate(immigration, imm_data):
    pops = abc_smc(immigration, immigration.prior, immigration.obs, imm_data, 4, 300, 0.3, seed=5)
    eps = [p.tolerance for p in pops]
    assert all(b <= a for a, b in zip(eps, eps[1:]))
    for p in pops:
        assert np.all(p.distances < p.tolerance)
        assert p.weights.sum() == pytest.approx(1.0)
    assert pops[-1].cov()[0, 0] < pops[0].cov()[0, 0]
    grid = np.linspace(-1, 4, 1001)
    post = quadrature_posterior(
        lambda z: immigration_loglik(imm_data.times, imm_data.values[0, :, 0], 2.0, math.exp(z), M=120),
        grid, np.zeros_like,
    )
    exact_mean = np.sum(post * grid) / np.sum(post)
    assert abs(pops[-1].mean()[0] - exact_mean) < 0.2


def test_smc_independent_of_worker_count(immigration, imm_data):
    args = (immigration, immigration.prior, immigration.obs, imm_data, 3, 100, 0.3, 11)
    one = abc_smc(*args, workers=1)
    eight = abc_smc(*args, workers=8)
    for a, b in zip(one, eight):
        assert np.array_equal(a.particles, b.particles)
        assert np.array_equal(a.weights, b.weights)
        assert a.n_proposals == b.n_proposals


def test_population_csv_round_trip(tmp_path, immigration, imm_data):
    pop = abc_rejection(immigration, immigration.prior, immigration.obs, imm_data, 20.0, 20, seed=1)
    pop.to_csv(tmp_path / "pop.csv")
    back = WeightedPopulation.from_csv(tmp_path / "pop.csv")
    assert np.array_equal(back.particles, pop.particles)
    assert np.allclose(back.weights, pop.weights)
