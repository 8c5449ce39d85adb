import math

import numpy as np
import pytest
from scipy import stats

from abcpmcmc.abc import DegeneratePopulationError, WeightedPopulation
from abcpmcmc.observation import synthesize_dataset
from abcpmcmc.pmcmc import (
    ChainConfig,
    ChainRecord,
    ParticleTuningError,
    hybrid_run,
    log_acceptance_ratio,
    next_particle_count,
    proposal_cov_from_abc,
    proposal_log_density,
    run_chain,
    run_chains,
    tune_particles,
)


def _population(Z, w=None):
    Z = np.asarray(Z, dtype=float)
    w = np.full(len(Z), 1.0 / len(Z)) if w is None else np.asarray(w, dtype=float)
    return WeightedPopulation(Z, w, np.zeros(len(Z)), 1.0)


@pytest.fixture(scope="module")
def imm_data(immigration):
    return synthesize_dataset(immigration, [5.0], [0], immigration.obs, np.arange(0.0, 4.5, 0.5),
                              np.random.default_rng(8))


def test_proposal_scale_identity_three_dims():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(50, 3))
    pop = _population(Z)
    cov = proposal_cov_from_abc(pop)
    assert np.allclose(cov, 2.38**2 / 3 * pop.cov(), atol=1e-12)
    assert np.allclose(2.38**2 / 3 * np.eye(3), 1.8881 * np.eye(3), atol=1e-4)


def test_proposal_scale_one_dim():
    pop = _population([[0.0], [1.0], [2.0], [3.0]])
    assert proposal_cov_from_abc(pop)[0, 0] == pytest.approx(5.6644 * pop.cov()[0, 0], rel=1e-12)


def test_degenerate_population_rejected():
    with pytest.raises(DegeneratePopulationError):
        proposal_cov_from_abc(_population([[1.0, 2.0]] * 10))
    with pytest.raises(DegeneratePopulationError):
        proposal_cov_from_abc(_population([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))


def test_next_particle_count():
    assert next_particle_count(100, 8.0, 2.0) == 400
    assert next_particle_count(100, 2.5, 2.0) == 200
    assert next_particle_count(10, 1e7) == 80
    assert next_particle_count(10, math.inf) == 80


def test_acceptance_ratio():
    ell = -123.4
    log_alpha = log_acceptance_ratio(ell, -1.0, ell + math.log(2), -1.0)
    assert min(1.0, math.exp(log_alpha)) == 1.0
    assert log_acceptance_ratio(ell, 0.0, -math.inf, 0.0) == -math.inf
    assert log_acceptance_ratio(-math.inf, 0.0, ell, 0.0) == math.inf


def test_proposal_density_symmetric():
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    a, b = np.array([0.1, -2.0]), np.array([1.5, 0.7])
    assert proposal_log_density(a, b, cov) == proposal_log_density(b, a, cov)
    assert proposal_log_density(a, b, cov) == pytest.approx(stats.multivariate_normal(b, cov).logpdf(a), abs=1e-12)


def test_chain_config_validation():
    with pytest.raises(ValueError):
        ChainConfig(np.array([[1.0, 2.0], [2.0, 1.0]]), 10, 10, [0.0, 0.0], 1)
    with pytest.raises(ValueError):
        ChainConfig(np.eye(1), 0, 10, [0.0], 1)


def test_tuning_reaches_target(immigration, imm_data):
    res = tune_particles(immigration, [5.0], immigration.init, immigration.obs, imm_data,
                         np.random.default_rng(1), n_min=5, repeats=30)
    assert res.variance <= 3.0
    assert res.trace[0][0] == 5


def test_tuning_cap(immigration, imm_data):
    with pytest.raises(ParticleTuningError):
        tune_particles(immigration, [5.0], immigration.init, immigration.obs, imm_data,
                       np.random.default_rng(1), target=1e-6, n_min=2, n_max=8, repeats=10)


def test_chain_bookkeeping(immigration, imm_data):
    cfg = ChainConfig(np.array([[0.05]]), 20, 300, [math.log(5.0)], seed=3)
    rec = run_chain(cfg, immigration, immigration.prior, immigration.obs, imm_data)
    assert len(rec) == 300 and np.array_equal(rec.iterations, np.arange(1, 301))
    assert 0 < rec.n_accepted < 300
    stay = ~rec.accepted[1:]
    assert np.array_equal(rec.samples[1:][stay], rec.samples[:-1][stay])
    assert np.array_equal(rec.log_lik[1:][stay], rec.log_lik[:-1][stay])
    moved = rec.accepted[1:]
    assert np.all(rec.samples[1:][moved] != rec.samples[:-1][moved])


def test_chain_thin_and_burn_in(immigration, imm_data):
    cfg = ChainConfig(np.array([[0.05]]), 10, 100, [math.log(5.0)], seed=3, thin=7, burn_in=20)
    rec = run_chain(cfg, immigration, immigration.prior, immigration.obs, imm_data)
    assert np.array_equal(rec.iterations, np.arange(7, 101, 7))
    assert rec.acceptance_rate == rec.n_accepted / 120


def test_chain_deterministic_and_csv_round_trip(tmp_path, immigration, imm_data):
    cfg = ChainConfig(np.array([[0.05]]), 10, 50, [math.log(5.0)], seed=4, chain=2)
    a = run_chain(cfg, immigration, immigration.prior, immigration.obs, imm_data)
    b = run_chain(cfg, immigration, immigration.prior, immigration.obs, imm_data)
    assert np.array_equal(a.samples, b.samples) and np.array_equal(a.log_lik, b.log_lik)
    a.to_csv(tmp_path / "c.csv")
    back = ChainRecord.from_csv(tmp_path / "c.csv")
    assert np.array_equal(back.samples, a.samples) and np.array_equal(back.accepted, a.accepted)


def test_failed_chain_is_reported(immigration, imm_data):
    good = ChainConfig(np.array([[0.05]]), 10, 20, [math.log(5.0)], seed=1, chain=0)
    bad = ChainConfig(np.array([[0.05]]), 10, 20, [10.0], seed=1, chain=1)
    recs = run_chains([good, bad], immigration, immigration.prior, immigration.obs, imm_data, workers=2)
    assert not recs[0].failed and recs[1].failed
    assert "prior support" in recs[1].error


def test_hybrid_run_small(immigration, imm_data):
    res = hybrid_run(immigration, immigration.prior, immigration.obs, imm_data, 2, 100, seed=7,
                     abc_generations=2, abc_particles=100, n_min=5, repeats=20)
    assert len(res.chains) == 2 and not res.failures
    assert res.proposal_cov.shape == (1, 1)
    assert res.chains[0].seed == 7 and res.chains[1].chain == 1
