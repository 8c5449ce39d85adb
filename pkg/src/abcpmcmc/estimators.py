"""Estimator-style wrappers around the ABC and hybrid samplers.

Both follow the scikit-learn conventions: constructor arguments are stored
unchanged, ``fit`` takes a :class:`~abcpmcmc.observation.Dataset` and learned
state ends in a trailing underscore.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .abc import abc_smc
from .diagnostics import pool, posterior_predictive
from .observation import Dataset
from .pmcmc import DEFAULT_VARIANCE_TARGET, TUNE_REPEATS, hybrid_run
from .ssa import MAX_EVENTS
from .streams import check_seed


def _check_dataset(D, model):
    if not isinstance(D, Dataset):
        raise TypeError(f"expected a Dataset, got {type(D).__name__}")
    if tuple(D.species_names) != tuple(model.species_names):
        raise ValueError("dataset species do not match the model")
    return D


class ABCSMC(BaseEstimator):
    """Sequential ABC with adaptive tolerances.

    Parameters
    ----------
    model : Model
        Parsed model carrying its prior and observation model.
    n_particles : int
        Population size per generation.
    n_generations : int
        Number of populations, the rejection generation included.
    quantile : float
        Tolerance quantile in ``(0, 1]``.
    max_proposals : int
        Proposal budget per generation.
    workers : int
        Threads used to evaluate proposals; results do not depend on it.
    random_state : int or None
        Master seed.

    Attributes
    ----------
    populations_ : list of WeightedPopulation
    population_ : WeightedPopulation
        The final population.
    tolerances_ : ndarray
    seed_ : int
    """

    def __init__(self, model, n_particles=1000, n_generations=5, quantile=0.3, max_proposals=10**6, workers=1,
                 random_state=None, max_events=MAX_EVENTS):
        self.model = model
        self.n_particles = n_particles
        self.n_generations = n_generations
        self.quantile = quantile
        self.max_proposals = max_proposals
        self.workers = workers
        self.random_state = random_state
        self.max_events = max_events

    def fit(self, D, y=None):
        D = _check_dataset(D, self.model)
        self.seed_ = check_seed(self.random_state)
        self.populations_ = abc_smc(
            self.model, self.model.prior, self.model.obs, D, self.n_generations, self.n_particles, self.quantile,
            self.seed_, workers=self.workers, max_proposals=self.max_proposals, max_events=self.max_events,
        )
        self.population_ = self.populations_[-1]
        self.tolerances_ = np.array([p.tolerance for p in self.populations_])
        return self

    def sample(self, size, random_state=None):
        """Draw ``size`` particles (sampling coordinates) from the final population by weight."""
        check_is_fitted(self, "population_")
        rng = np.random.default_rng(random_state)
        return self.population_.particles[self.population_.draw(rng, size)]


class HybridPMCMC(BaseEstimator):
    """ABC-SMC initialisation followed by parallel pseudo-marginal chains.

    Parameters
    ----------
    model : Model
    n_chains, n_iterations, thin, burn_in : int
        Chain layout; every chain runs ``burn_in + n_iterations`` updates and
        keeps every ``thin``-th of the last ``n_iterations``.
    abc_generations, abc_particles, abc_quantile :
        Settings of the ABC stage.
    target : float
        Log-likelihood variance aimed at when choosing the particle count.
    n_min, n_max, repeats : int
        Particle-count search range and filter runs per variance estimate.
    workers : int
    random_state : int or None

    Attributes
    ----------
    result_ : HybridResult
    chains_ : list of ChainRecord
    population_ : WeightedPopulation
    proposal_cov_ : ndarray
    n_particles_ : int
    pooled_ : PooledPosterior
    """

    def __init__(self, model, n_chains=4, n_iterations=1000, thin=1, burn_in=0, abc_generations=5,
                 abc_particles=1000, abc_quantile=0.3, abc_max_proposals=10**6, target=DEFAULT_VARIANCE_TARGET,
                 n_min=10, n_max=20_000, repeats=TUNE_REPEATS, workers=1, random_state=None, max_events=MAX_EVENTS):
        self.model = model
        self.n_chains = n_chains
        self.n_iterations = n_iterations
        self.thin = thin
        self.burn_in = burn_in
        self.abc_generations = abc_generations
        self.abc_particles = abc_particles
        self.abc_quantile = abc_quantile
        self.abc_max_proposals = abc_max_proposals
        self.target = target
        self.n_min = n_min
        self.n_max = n_max
        self.repeats = repeats
        self.workers = workers
        self.random_state = random_state
        self.max_events = max_events

    def fit(self, D, y=None, populations=None):
        """Run the pipeline; ``populations`` reuses an earlier ABC run."""
        D = _check_dataset(D, self.model)
        self.seed_ = check_seed(self.random_state)
        res = hybrid_run(
            self.model, self.model.prior, self.model.obs, D, self.n_chains, self.n_iterations, self.seed_,
            abc_generations=self.abc_generations, abc_particles=self.abc_particles, abc_quantile=self.abc_quantile,
            abc_max_proposals=self.abc_max_proposals, thin=self.thin, burn_in=self.burn_in, workers=self.workers,
            target=self.target, n_min=self.n_min, n_max=self.n_max, repeats=self.repeats,
            max_events=self.max_events, populations=populations,
        )
        self.result_ = res
        self.chains_ = res.chains
        self.population_ = res.population
        self.proposal_cov_ = res.proposal_cov
        self.n_particles_ = res.n_particles
        self.pooled_ = pool(res.chains)
        self.first_row_ = D.values[0, 0]
        return self

    def predict(self, times, draws=200, random_state=0):
        """Posterior predictive 2.5/50/97.5% quantiles of the data at ``times``, shape ``(T, 3, u)``."""
        check_is_fitted(self, "pooled_")
        pred = posterior_predictive(
            self.model, self.model.obs, self.pooled_, self.model.init, times, draws, check_seed(random_state),
            prior=self.model.prior, workers=self.workers, max_events=self.max_events, observed=self.first_row_,
        )
        return pred["quantiles"]
