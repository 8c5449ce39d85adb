"""Bayesian inference for stochastic kinetic models.

Sequential ABC locates the posterior cheaply; its final population then
tunes and initialises parallel pseudo-marginal MCMC chains whose likelihood
comes from a bootstrap particle filter.
"""

from .abc import WeightedPopulation, abc_rejection, abc_smc
from .diagnostics import PooledPosterior, gelman_rubin, pool, posterior_predictive, speedup
from .estimators import ABCSMC, HybridPMCMC
from .modelspec import Model, bundled_model, load_model, parse_model
from .observation import Dataset, ObsModel, read_dataset, synthesize_dataset
from .pfilter import bootstrap_filter, replicate_log_lik
from .pmcmc import ChainConfig, ChainRecord, hybrid_run, run_chain
from .ssa import simulate_at_times, simulate_direct

__version__ = "0.1.0"

__all__ = [
    "ABCSMC",
    "ChainConfig",
    "ChainRecord",
    "Dataset",
    "HybridPMCMC",
    "Model",
    "ObsModel",
    "PooledPosterior",
    "WeightedPopulation",
    "abc_rejection",
    "abc_smc",
    "bootstrap_filter",
    "bundled_model",
    "gelman_rubin",
    "hybrid_run",
    "load_model",
    "parse_model",
    "pool",
    "posterior_predictive",
    "read_dataset",
    "replicate_log_lik",
    "run_chain",
    "simulate_at_times",
    "simulate_direct",
    "speedup",
    "synthesize_dataset",
]
