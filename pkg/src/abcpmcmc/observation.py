"""Measurement-error models and the replicated dataset container."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .priors import _fmt
from .ssa import OBS_GAUSSIAN, OBS_POISSON, simulate_at_times

MISSING = "NA"
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class ObsModel:
    """Independent per-species observation error.

    ``kind`` is ``"gaussian"`` (``d ~ N(x, sigma^2)``, sigma per species) or
    ``"poisson"`` (``d ~ Pois(x)``). ``mask`` flags the observed species.
    """

    kind: str
    mask: np.ndarray
    sigma: np.ndarray = None
    code: int = field(init=False, repr=False)

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool)
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)
        if self.kind == "gaussian":
            if self.sigma is None:
                raise ValueError("gaussian observation model needs sigma")
            sigma = np.array(self.sigma, dtype=float).reshape(-1)
            if sigma.size == 1:
                sigma = np.full(mask.size, sigma[0])
            if sigma.shape != mask.shape:
                raise ValueError("sigma must have one entry per species")
            if np.any(sigma[mask] <= 0) or not np.all(np.isfinite(sigma[mask])):
                raise ValueError("gaussian sigma must be positive and finite")
            sigma.flags.writeable = False
            object.__setattr__(self, "sigma", sigma)
            object.__setattr__(self, "code", OBS_GAUSSIAN)
        elif self.kind == "poisson":
            object.__setattr__(self, "sigma", np.ones(mask.size))
            object.__setattr__(self, "code", OBS_POISSON)
        else:
            raise ValueError(f"unknown observation model {self.kind!r}")
        if not mask.any():
            raise ValueError("observation model observes no species")

    @classmethod
    def gaussian(cls, sigma, mask):
        return cls("gaussian", mask, sigma)

    @classmethod
    def poisson(cls, mask):
        return cls("poisson", mask)

    def render(self, species_names):
        lines = []
        for j, name in enumerate(species_names):
            if not self.mask[j]:
                continue
            if self.kind == "gaussian":
                lines.append(f"obs {name} ~ normal({_fmt(self.sigma[j])})")
            else:
                lines.append(f"obs {name} ~ poisson")
        return lines

    def __eq__(self, other):
        if not isinstance(other, ObsModel):
            return NotImplemented
        if self.kind != other.kind or not np.array_equal(self.mask, other.mask):
            return False
        return self.kind == "poisson" or np.array_equal(self.sigma[self.mask], other.sigma[other.mask])

    __hash__ = None


def _check_poisson_data(d):
    if np.any(d < 0) or np.any(d != np.floor(d)):
        raise ValueError("poisson observations must be non-negative integers")


def log_obs_density(obs, d_t, x_t):
    """``log p(d_t | x_t)`` summed over observed, non-missing species."""
    d_t = np.asarray(d_t, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    if d_t.shape != obs.mask.shape or x_t.shape != obs.mask.shape:
        raise ValueError("observation row and state must have one entry per species")
    return float(log_obs_density_many(obs, d_t, x_t[None, :])[0])


def log_obs_density_many(obs, d_t, X):
    """Vectorised :func:`log_obs_density` over the rows of ``X`` (particles)."""
    sel = obs.mask & ~np.isnan(d_t)
    if not sel.any():
        return np.zeros(X.shape[0])
    d = d_t[sel]
    x = np.asarray(X, dtype=float)[:, sel]
    if obs.kind == "gaussian":
        s = obs.sigma[sel]
        z = (d - x) / s
        return np.sum(-0.5 * z * z - np.log(s) - _LOG_SQRT_2PI, axis=1)
    _check_poisson_data(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = d * np.log(x) - x - gammaln(d + 1.0)
    lp = np.where(x == 0, np.where(d == 0, 0.0, -np.inf), lp)
    return np.sum(lp, axis=1)


def corrupt(obs, x, rng):
    """Draw one noisy observation of state ``x``; unobserved species are NaN."""
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, np.nan)
    m = obs.mask
    if obs.kind == "gaussian":
        out[m] = x[m] + obs.sigma[m] * rng.standard_normal(int(m.sum()))
    else:
        out[m] = rng.poisson(x[m])
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations at shared times, one ``(T, u)`` matrix per replicate.

    ``values`` has shape ``(R, T, u)`` over all model species; missing or
    unobserved entries are NaN. ``columns`` lists the species present in the
    source files. The first time is the start time of every path.
    """

    times: np.ndarray
    values: np.ndarray
    species_names: tuple
    columns: tuple = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        values = np.array(self.values, dtype=float)
        if values.ndim == 2:
            values = values[None]
        if times.ndim != 1 or times.size == 0:
            raise ValueError("times must be a non-empty 1-d sequence")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if values.ndim != 3 or values.shape[1:] != (times.size, len(self.species_names)):
            raise ValueError(
                f"values must have shape (replicates, {times.size}, {len(self.species_names)}), got {values.shape}"
            )
        for r in range(values.shape[0]):
            if not np.any(np.isfinite(values[r])):
                raise ValueError(f"replicate {r} has no observed entries")
        times.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "species_names", tuple(self.species_names))
        if self.columns is None:
            cols = tuple(n for j, n in enumerate(self.species_names) if np.any(np.isfinite(values[:, :, j])))
            object.__setattr__(self, "columns", cols)

    @property
    def n_replicates(self):
        return self.values.shape[0]

    @property
    def t0(self):
        return float(self.times[0])

    def replicate(self, r):
        return Dataset(self.times, self.values[r : r + 1], self.species_names, self.columns, dict(self.metadata))

    def replicates(self):
        return [self.replicate(r) for r in range(self.n_replicates)]

    def to_csv(self, path):
        """Write one CSV per replicate; returns the written paths."""
        path = Path(path)
        if self.n_replicates == 1:
            paths = [path]
        else:
            paths = [path.with_name(f"{path.stem}_rep{r + 1}{path.suffix}") for r in range(self.n_replicates)]
        cols = [self.species_names.index(c) for c in self.columns]
        for r, p in enumerate(paths):
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["time", *self.columns])
                for k, t in enumerate(self.times):
                    row = [repr(float(t))]
                    for j in cols:
                        val = self.values[r, k, j]
                        row.append(MISSING if np.isnan(val) else repr(float(val)))
                    w.writerow(row)
        return paths


def read_dataset(paths, species_names):
    """Read replicate CSV files (header ``time,<species>...``, ``NA`` = missing)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    species_names = tuple(species_names)
    times, reps, columns = None, [], None
    for p in paths:
        with open(p, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0].strip() != "time":
            raise ValueError(f"{p}: first column must be 'time'")
        header = [h.strip() for h in rows[0][1:]]
        unknown = [h for h in header if h not in species_names]
        if unknown:
            raise ValueError(f"{p}: unknown species columns {unknown}")
        if columns is None:
            columns = tuple(header)
        elif tuple(header) != columns:
            raise ValueError(f"{p}: columns differ from the first replicate")
        t = np.array([float(r[0]) for r in rows[1:]])
        mat = np.full((t.size, len(species_names)), np.nan)
        for k, r in enumerate(rows[1:]):
            if len(r) != len(header) + 1:
                raise ValueError(f"{p}: row {k + 2} has {len(r)} fields, expected {len(header) + 1}")
            for name, cell in zip(header, r[1:]):
                cell = cell.strip()
                if cell != MISSING:
                    mat[k, species_names.index(name)] = float(cell)
        if times is None:
            times = t
        elif not np.array_equal(times, t):
            raise ValueError(f"{p}: observation times differ from the first replicate")
        reps.append(mat)
    return Dataset(times, np.stack(reps), species_names, columns)


def synthesize_dataset(model, theta, x0, obs, times, rng, replicates=1, seed=None, max_events=None):
    """Simulate, sample at ``times`` and corrupt; one path per replicate.

    ``x0`` is a single state or one state per replicate; ``theta`` is on the
    natural scale. All species appear as columns (unobserved ones as NA).
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ValueError("times must be non-empty")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.int64))
    if x0.shape[0] == 1 and replicates > 1:
        x0 = np.repeat(x0, replicates, axis=0)
    kwargs = {} if max_events is None else {"max_events": max_events}
    values = []
    for r in range(x0.shape[0]):
        states = simulate_at_times(model, theta, x0[r], times, rng, **kwargs)
        values.append(np.array([corrupt(obs, s, rng) for s in states]))
    meta = {"theta_true": [float(v) for v in theta], "x0": x0.tolist()}
    if seed is not None:
        meta["seed"] = int(seed)
    return Dataset(times, np.stack(values), model.species_names, tuple(model.species_names), meta)
