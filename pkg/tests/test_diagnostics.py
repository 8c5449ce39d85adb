import json
import math

import numpy as np
import pytest

from abcpmcmc.abc import WeightedPopulation
from abcpmcmc.cli import EXIT_OK, main
from abcpmcmc.diagnostics import (
    PooledPosterior,
    autocorrelation,
    band_coverage,
    compare_abc_pmcmc,
    gelman_rubin,
    pool,
    posterior_predictive,
    speedup,
    thin,
    weighted_ks,
    write_table,
)
from abcpmcmc.modelspec import DATA_DIR
from abcpmcmc.observation import Dataset
from abcpmcmc.pmcmc import ChainRecord


def _record(samples, chain=0, error=None):
    samples = np.asarray(samples, dtype=float).reshape(len(samples), -1)
    n = len(samples)
    return ChainRecord(samples, np.zeros(n), np.ones(n, dtype=bool), np.arange(1, n + 1), n, n,
                       chain=chain, error=error)


def test_acf_alternating_series():
    n = 1000
    x = np.tile([1.0, -1.0], n // 2)
    r = autocorrelation(x, 2)
    assert r[0] == 1.0
    assert abs(r[1] + 1.0) <= 2 / n
    assert abs(r[2] - 1.0) <= 3 / n


def test_acf_white_noise():
    n = 10_000
    r = autocorrelation(np.random.default_rng(0).standard_normal(n), 5)
    assert abs(r[1]) < 3 / math.sqrt(n)


def test_acf_rejects_constant_and_short():
    with pytest.raises(ValueError):
        autocorrelation(np.ones(10), 2)
    with pytest.raises(ValueError):
        autocorrelation(np.arange(3.0), 3)


def test_thin_keeps_every_kth():
    rec = _record(np.arange(10.0))
    t = thin(rec, 3)
    assert np.array_equal(t.samples[:, 0], [0, 3, 6, 9])
    assert np.array_equal(t.iterations, [1, 4, 7, 10])
    assert np.array_equal(thin(np.arange(5), 2), [0, 2, 4])


def test_rhat_duplicated_chain():
    x = np.random.default_rng(1).standard_normal(500)
    assert gelman_rubin([x, x.copy()]) <= 1.001


def test_rhat_same_sampler():
    rng = np.random.default_rng(2)
    assert gelman_rubin([rng.standard_normal(10_000), rng.standard_normal(10_000)]) < 1.05


def test_rhat_separated_chains():
    rng = np.random.default_rng(3)
    assert gelman_rubin([rng.standard_normal(200), 100 + rng.standard_normal(200)]) > 2


def test_rhat_accepts_records():
    rng = np.random.default_rng(4)
    recs = [_record(rng.standard_normal((100, 2)), chain=c) for c in range(3)]
    assert gelman_rubin(recs, index=1) == gelman_rubin([r.samples[:, 1] for r in recs])
    with pytest.raises(ValueError):
        gelman_rubin(recs[:1])


def test_speedup_values():
    assert speedup(8, 1000, 10_000) == 11000 / 2250
    for N in (1, 3, 7, 8, 64):
        assert speedup(N, 0, 999) == N
    assert speedup(1, 500, 100) == 1.0
    with pytest.raises(ValueError):
        speedup(0, 1, 1)


def test_weighted_ks_extremes():
    x = np.array([0.0, 1.0, 2.0])
    assert weighted_ks(x, None, x, None) == 0.0
    assert weighted_ks(x, None, x + 10, None) == 1.0
    assert weighted_ks(np.array([0.0, 1.0]), np.array([3.0, 1.0]), np.array([0.0]), None) == pytest.approx(0.25)


def test_pool_skips_failures():
    ok = _record(np.ones((4, 2)), chain=0)
    bad = ChainRecord(np.empty((0, 2)), np.empty(0), np.empty(0, bool), np.empty(0, np.int64), 0, 0,
                      chain=1, error="RuntimeError: boom")
    p = pool([ok, bad, _record(np.zeros((3, 2)), chain=2)])
    assert len(p) == 7 and np.array_equal(p.chain, [0, 0, 0, 0, 2, 2, 2])
    with pytest.raises(ValueError):
        pool([bad])


def test_interval_central():
    p = PooledPosterior(np.arange(1001.0)[:, None], np.zeros(1001), ("a",))
    assert np.allclose(p.interval(0.95), [[25.0, 975.0]])


def test_compare_report_fields():
    rng = np.random.default_rng(5)
    pop = WeightedPopulation(rng.normal(size=(200, 2)), np.full(200, 1 / 200), np.zeros(200), 1.0)
    pooled = PooledPosterior(rng.normal(0.5, 0.5, size=(300, 2)), np.zeros(300), ("a", "b"))
    report = compare_abc_pmcmc(pop, pooled)
    assert [r["parameter"] for r in report] == ["a", "b"]
    assert all(0 < r["ks"] <= 1 for r in report)
    assert report[0]["abc_var"] > report[0]["pmcmc_var"]


def test_predictive_quantiles_ordered(immigration):
    pooled = PooledPosterior(np.full((50, 1), math.log(5.0)), np.zeros(50), ("log_lam",))
    times = np.arange(0.0, 4.0)
    pred = posterior_predictive(immigration, immigration.obs, pooled, immigration.init, times, 100, seed=1,
                                prior=immigration.prior)
    q = pred["quantiles"][:, :, 0]
    assert pred["n_used"] == 100
    assert np.all(q[:, 0] <= q[:, 1]) and np.all(q[:, 1] <= q[:, 2])
    assert q[3, 1] == pytest.approx(15.0, abs=2.0)
    again = posterior_predictive(immigration, immigration.obs, pooled, immigration.init, times, 100, seed=1,
                                 prior=immigration.prior, workers=4)
    assert np.array_equal(again["quantiles"], pred["quantiles"])
    D = Dataset(times, np.array([[0.0], [5.0], [10.0], [15.0]]), ("X",))
    assert band_coverage(pred, D, immigration.obs) == 1.0


def test_write_table_round_trips_floats(tmp_path):
    write_table(tmp_path / "t.csv", ["a", "b"], [["x", 0.1 + 0.2]])
    assert (tmp_path / "t.csv").read_text().splitlines()[1] == "x,0.30000000000000004"


@pytest.mark.slow
def test_aphid_predictive_coverage(tmp_path):
    assert main(["hybrid", "--config", str(DATA_DIR / "aphid.ini"), "--out-dir", str(tmp_path)]) == EXIT_OK
    summary = json.loads((tmp_path / "diagnostics.json").read_text())
    print(f"aphid predictive coverage {summary['predictive_coverage']:.3f}, max R-hat {summary['max_rhat']:.3f}")
    assert summary["predictive_coverage"] >= 0.6
