"""Prior families for rate parameters and initial states.

Log densities are hand-rolled with :mod:`math` because they sit inside the
ABC proposal loop, where the per-call overhead of ``scipy.stats`` adds up.
Every ``logpdf`` returns ``-inf`` outside the support instead of raising.
"""

import math
from dataclasses import dataclass, field

import numpy as np

NEG_INF = -math.inf


def _fmt(value):
    if float(value).is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def _is_count(x):
    return x >= 0 and float(x).is_integer()


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float
    discrete = False

    def __post_init__(self):
        if not self.high > self.low:
            raise ValueError(f"uniform needs low < high, got ({self.low}, {self.high})")

    def logpdf(self, x):
        if self.low <= x <= self.high:
            return -math.log(self.high - self.low)
        return NEG_INF

    def sample(self, rng):
        return rng.uniform(self.low, self.high)

    def mean(self):
        return 0.5 * (self.low + self.high)

    def var(self):
        return (self.high - self.low) ** 2 / 12.0

    def render(self):
        return f"uniform({_fmt(self.low)}, {_fmt(self.high)})"


@dataclass(frozen=True)
class Gamma:
    """Gamma with shape ``a`` and rate ``b`` (mean ``a / b``)."""

    shape: float
    rate: float
    discrete = False

    def __post_init__(self):
        if self.shape <= 0 or self.rate <= 0:
            raise ValueError("gamma shape and rate must be positive")

    def logpdf(self, x):
        if x <= 0:
            return NEG_INF
        a, b = self.shape, self.rate
        return a * math.log(b) - math.lgamma(a) + (a - 1.0) * math.log(x) - b * x

    def sample(self, rng):
        return rng.gamma(self.shape, 1.0 / self.rate)

    def mean(self):
        return self.shape / self.rate

    def var(self):
        return self.shape / self.rate**2

    def render(self):
        return f"gamma({_fmt(self.shape)}, {_fmt(self.rate)})"


@dataclass(frozen=True)
class Exponential:
    """Exponential with the given rate (mean ``1 / rate``)."""

    rate: float
    discrete = False

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("exponential rate must be positive")

    def logpdf(self, x):
        if x < 0:
            return NEG_INF
        return math.log(self.rate) - self.rate * x

    def sample(self, rng):
        return rng.exponential(1.0 / self.rate)

    def mean(self):
        return 1.0 / self.rate

    def var(self):
        return 1.0 / self.rate**2

    def render(self):
        return f"exponential({_fmt(self.rate)})"


@dataclass(frozen=True)
class Poisson:
    rate: float
    discrete = True

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("poisson rate must be non-negative")

    def logpdf(self, x):
        if not _is_count(x):
            return NEG_INF
        if self.rate == 0:
            return 0.0 if x == 0 else NEG_INF
        return x * math.log(self.rate) - self.rate - math.lgamma(x + 1.0)

    def sample(self, rng):
        return int(rng.poisson(self.rate))

    def mean(self):
        return self.rate

    def var(self):
        return self.rate

    def render(self):
        return f"poisson({_fmt(self.rate)})"


@dataclass(frozen=True)
class Geometric:
    """Number of failures before the first success; support ``0, 1, 2, ...``."""

    p: float
    discrete = True

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ValueError("geometric p must lie in (0, 1]")

    def logpdf(self, x):
        if not _is_count(x):
            return NEG_INF
        if self.p == 1:
            return 0.0 if x == 0 else NEG_INF
        return math.log(self.p) + x * math.log1p(-self.p)

    def sample(self, rng):
        # numpy counts trials, starting at 1
        return int(rng.geometric(self.p)) - 1

    def mean(self):
        return (1 - self.p) / self.p

    def var(self):
        return (1 - self.p) / self.p**2

    def render(self):
        return f"geometric({_fmt(self.p)})"


@dataclass(frozen=True)
class PointMass:
    value: float
    discrete = True

    def logpdf(self, x):
        return 0.0 if x == self.value else NEG_INF

    def sample(self, rng):
        return self.value

    def mean(self):
        return self.value

    def var(self):
        return 0.0

    def render(self):
        return f"point_mass({_fmt(self.value)})"


@dataclass(frozen=True)
class Shifted:
    """``base + offset`` where ``base`` is a number or another species' initial value."""

    base: object
    offset: object
    discrete = True

    def logpdf(self, x, base_value=None):
        b = self.base if base_value is None else base_value
        return self.offset.logpdf(x - b)

    def sample(self, rng, base_value=None):
        b = self.base if base_value is None else base_value
        return b + self.offset.sample(rng)

    def render(self):
        base = self.base if isinstance(self.base, str) else _fmt(self.base)
        return f"shifted({base}, {self.offset.render()})"


@dataclass(frozen=True)
class Observed:
    """Initial value read off the first row of each data replicate."""

    discrete = True

    def render(self):
        return "observed"


FAMILIES = {
    "uniform": Uniform,
    "gamma": Gamma,
    "exponential": Exponential,
    "poisson": Poisson,
    "geometric": Geometric,
    "point_mass": PointMass,
}


@dataclass(frozen=True)
class ParamPrior:
    """Marginal prior of one rate parameter.

    With ``log_scale`` the distribution is placed on ``log(theta)`` and all
    samplers work with ``log(theta)``; otherwise on ``theta`` itself.
    """

    name: str
    dist: object
    log_scale: bool = False

    def render(self):
        lhs = f"log {self.name}" if self.log_scale else self.name
        return f"prior {lhs} ~ {self.dist.render()}"


@dataclass(frozen=True)
class PriorSpec:
    """Independent product prior over the parameter vector.

    Vectors handled here are in *sampling coordinates*: ``log(theta_i)`` for
    log-scale parameters and ``theta_i`` otherwise.
    """

    params: tuple
    free: np.ndarray = field(init=False, repr=False, compare=False)
    log_mask: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        free = np.array([not isinstance(p.dist, PointMass) for p in self.params], dtype=bool)
        log_mask = np.array([p.log_scale for p in self.params], dtype=bool)
        free.flags.writeable = False
        log_mask.flags.writeable = False
        object.__setattr__(self, "free", free)
        object.__setattr__(self, "log_mask", log_mask)

    @property
    def names(self):
        return tuple(p.name for p in self.params)

    @property
    def dim(self):
        return len(self.params)

    def coordinate_names(self):
        return [f"log_{p.name}" if p.log_scale else p.name for p in self.params]

    def log_density(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise ValueError(f"expected a parameter vector of length {self.dim}, got shape {z.shape}")
        total = 0.0
        for p, value in zip(self.params, z):
            lp = p.dist.logpdf(float(value))
            if lp == NEG_INF:
                return NEG_INF
            total += lp
        return total

    def sample(self, rng):
        return np.array([p.dist.sample(rng) for p in self.params], dtype=float)

    def to_natural(self, z):
        z = np.asarray(z, dtype=float)
        return np.where(self.log_mask, np.exp(np.where(self.log_mask, z, 0.0)), z)

    def to_sampling(self, theta):
        theta = np.asarray(theta, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(self.log_mask, np.log(np.where(self.log_mask, theta, 1.0)), theta)


def log_prior_density(prior, z):
    """Joint log prior density at ``z`` (sampling coordinates); ``-inf`` off support."""
    return prior.log_density(z)


class InitialStatePrior:
    """Prior over the initial species counts.

    Each species carries a fixed count (:class:`PointMass`), a count
    distribution, an :class:`Observed` marker, or a :class:`Shifted`
    distribution anchored on another species.
    """

    def __init__(self, species_names, specs):
        self.species_names = tuple(species_names)
        self.specs = tuple(specs)
        if len(self.specs) != len(self.species_names):
            raise ValueError("one initial-state spec per species is required")
        index = {name: i for i, name in enumerate(self.species_names)}
        self._order = []
        pending = list(range(len(self.specs)))
        while pending:
            progressed = False
            for i in list(pending):
                spec = self.specs[i]
                if isinstance(spec, Shifted) and isinstance(spec.base, str):
                    if spec.base not in index:
                        raise ValueError(f"shifted initial state refers to unknown species {spec.base!r}")
                    if index[spec.base] in pending:
                        continue
                self._order.append(i)
                pending.remove(i)
                progressed = True
            if not progressed:
                raise ValueError("cyclic shifted initial-state specification")
        self._index = index

    @property
    def needs_observation(self):
        return any(isinstance(s, Observed) for s in self.specs)

    def sample(self, rng, size, observed=None):
        """Draw ``size`` initial states, shape ``(size, u)``.

        ``observed`` is the replicate's first data row in species order
        (NaN where missing); it feeds species marked ``observed``.
        """
        u = len(self.specs)
        out = np.zeros((size, u), dtype=np.int64)
        for i in self._order:
            spec = self.specs[i]
            if isinstance(spec, Observed):
                if observed is None or not np.isfinite(observed[i]):
                    raise ValueError(
                        f"initial count of {self.species_names[i]} is 'observed' but the data has no value at the start time"
                    )
                out[:, i] = int(round(observed[i]))
            elif isinstance(spec, PointMass):
                out[:, i] = int(spec.value)
            elif isinstance(spec, Shifted):
                if isinstance(spec.base, str):
                    base = out[:, self._index[spec.base]]
                else:
                    base = np.full(size, int(spec.base))
                out[:, i] = base + np.array([spec.offset.sample(rng) for _ in range(size)], dtype=np.int64)
            elif isinstance(spec, Poisson):
                out[:, i] = rng.poisson(spec.rate, size=size)
            elif isinstance(spec, Geometric):
                out[:, i] = rng.geometric(spec.p, size=size) - 1
            else:
                out[:, i] = [int(round(spec.sample(rng))) for _ in range(size)]
        if np.any(out < 0):
            raise ValueError("initial-state prior produced a negative count")
        return out

    def __eq__(self, other):
        return isinstance(other, InitialStatePrior) and (self.species_names, self.specs) == (
            other.species_names,
            other.specs,
        )

    def __hash__(self):
        return hash((self.species_names, self.specs))

    def __repr__(self):
        return f"InitialStatePrior({dict(zip(self.species_names, self.specs))!r})"
