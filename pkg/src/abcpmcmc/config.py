"""Run configuration: a sectioned INI file with typed, validated fields.

Relative paths are resolved against the directory of the config file. A
``model`` value that is not an existing file but names a bundled model
(``lv``, ``aphid``, ``gene``) loads the bundled definition.
"""

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .modelspec import BUNDLED_MODELS, ModelSyntaxError, bundled_model, load_model
from .ssa import MAX_EVENTS

DEFAULTS = {
    "run": {
        "model": "",
        "data": "",
        "seed": "1",
        "workers": "1",
        "max_events": str(MAX_EVENTS),
    },
    "simulate": {
        "theta": "",
        "x0": "",
        "times": "",
        "replicates": "1",
    },
    "abc": {
        "particles": "1000",
        "quantile": "0.3",
        "generations": "5",
        "max_proposals": "1000000",
    },
    "pmcmc": {
        "population": "",
        "chains": "4",
        "iterations": "1000",
        "thin": "1",
        "burn_in": "0",
        "target": "2.0",
        "n_min": "10",
        "n_max": "20000",
        "repeats": "50",
    },
    "diagnose": {
        "run_dir": "",
        "max_lag": "50",
        "predictive_draws": "200",
        "thin": "1",
    },
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _floats(text, key):
    text = text.strip()
    if not text:
        return np.empty(0)
    try:
        return np.array([float(v) for v in text.replace(",", " ").split()])
    except ValueError:
        raise ConfigError(f"{key}: expected numbers, got {text!r}") from None


def parse_times(text):
    """``start:stop:step`` (stop included) or an explicit list of numbers."""
    text = text.strip()
    if ":" in text:
        try:
            start, stop, step = (float(v) for v in text.split(":"))
        except ValueError:
            raise ConfigError(f"times: expected start:stop:step, got {text!r}") from None
        if step <= 0 or stop < start:
            raise ConfigError("times: need step > 0 and stop >= start")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return np.round(start + step * np.arange(n), 12)
    return _floats(text, "times")


@dataclass
class RunConfig:
    """Parsed configuration plus the raw text kept for the run manifest."""

    parser: configparser.ConfigParser
    base_dir: Path
    source_text: str = ""
    overrides: dict = field(default_factory=dict)

    def get(self, section, key):
        return self.parser.get(section, key)

    def getint(self, section, key, minimum=None):
        try:
            value = self.parser.getint(section, key)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be an integer") from None
        if minimum is not None and value < minimum:
            raise ConfigError(f"[{section}] {key} must be at least {minimum}, got {value}")
        return value

    def getfloat(self, section, key):
        try:
            return self.parser.getfloat(section, key)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number") from None

    @property
    def seed(self):
        return self.getint("run", "seed", minimum=0)

    @property
    def workers(self):
        return self.getint("run", "workers", minimum=1)

    @property
    def max_events(self):
        return self.getint("run", "max_events", minimum=1)

    def path(self, value):
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def model(self):
        value = self.get("run", "model").strip()
        if not value:
            raise ConfigError("[run] model is required")
        p = self.path(value)
        try:
            if p.is_file():
                return load_model(p)
            if value in BUNDLED_MODELS:
                return bundled_model(value)
        except ModelSyntaxError as exc:
            raise ConfigError(f"{value}: {exc}") from None
        raise ConfigError(f"model file not found: {p}")

    def data_paths(self, required=True):
        value = self.get("run", "data").strip()
        if not value:
            if required:
                raise ConfigError("[run] data is required")
            return []
        paths = [self.path(v) for v in value.replace(",", " ").split()]
        missing = [str(p) for p in paths if not p.is_file()]
        if missing:
            raise ConfigError(f"data file not found: {', '.join(missing)}")
        return paths

    def floats(self, section, key):
        return _floats(self.get(section, key), f"[{section}] {key}")

    def times(self):
        t = parse_times(self.get("simulate", "times"))
        if t.size == 0:
            raise ConfigError("[simulate] times must not be empty")
        if np.any(np.diff(t) <= 0):
            raise ConfigError("[simulate] times must be strictly increasing")
        return t

    def abc_settings(self):
        q = self.getfloat("abc", "quantile")
        if not 0 < q <= 1:
            raise ConfigError(f"[abc] quantile must lie in (0, 1], got {q}")
        return {
            "n_particles": self.getint("abc", "particles", minimum=2),
            "q": q,
            "n_generations": self.getint("abc", "generations", minimum=1),
            "max_proposals": self.getint("abc", "max_proposals", minimum=1),
        }

    def pmcmc_settings(self):
        target = self.getfloat("pmcmc", "target")
        if not target > 0:
            raise ConfigError("[pmcmc] target must be positive")
        s = {
            "n_chains": self.getint("pmcmc", "chains", minimum=1),
            "n_iterations": self.getint("pmcmc", "iterations", minimum=1),
            "thin": self.getint("pmcmc", "thin", minimum=1),
            "burn_in": self.getint("pmcmc", "burn_in", minimum=0),
            "target": target,
            "n_min": self.getint("pmcmc", "n_min", minimum=1),
            "n_max": self.getint("pmcmc", "n_max", minimum=1),
            "repeats": self.getint("pmcmc", "repeats", minimum=2),
        }
        if s["n_max"] < s["n_min"]:
            raise ConfigError("[pmcmc] n_max must be at least n_min")
        return s

    def render(self):
        buf = io.StringIO()
        self.parser.write(buf)
        return buf.getvalue()


def default_parser():
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_dict(DEFAULTS)
    return parser


def load_config(path=None, seed=None, workers=None):
    """Read ``path`` over the defaults and apply command-line overrides."""
    parser = default_parser()
    text = ""
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.resolve().parent
        unknown = [s for s in parser.sections() if s not in DEFAULTS]
        if unknown:
            raise ConfigError(f"{path}: unknown sections {unknown}")
        for section in parser.sections():
            extra = [k for k in parser[section] if k not in DEFAULTS[section]]
            if extra:
                raise ConfigError(f"{path}: unknown keys in [{section}]: {extra}")
    overrides = {}
    if seed is not None:
        parser.set("run", "seed", str(seed))
        overrides["seed"] = seed
    if workers is not None:
        parser.set("run", "workers", str(workers))
        overrides["workers"] = workers
    return RunConfig(parser, base, text, overrides)
