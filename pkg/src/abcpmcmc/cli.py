"""Command-line entry point.

Subcommands ``simulate``, ``abc``, ``pmcmc``, ``hybrid`` and ``diagnose``
share the flags ``--config``, ``--seed``, ``--workers``, ``--out-dir`` and
``--print-config``. Exit status is 0 on success, 1 when a run fails and 2
when the configuration or inputs are invalid.
"""

import argparse
import json
import logging
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from .abc import WeightedPopulation, abc_smc
from .config import ConfigError, load_config
from .diagnostics import (
    autocorrelation,
    band_coverage,
    compare_abc_pmcmc,
    gelman_rubin,
    pool,
    posterior_predictive,
    predictive_rows,
    thin,
    write_table,
)
from .modelspec import ModelSyntaxError
from .observation import Dataset, corrupt, read_dataset
from .pmcmc import ChainConfig, ChainRecord, hybrid_run, proposal_cov_from_abc, run_chains, tune_particles
from .ssa import simulate_direct, states_at_times
from .streams import RNG_ALGORITHM, STAGE_INIT, STAGE_SIMULATE, STAGE_TUNE, substream

logger = logging.getLogger("abcpmcmc")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__

        return __version__


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(out_dir, command, cfg):
    """Everything needed to rerun: config copy, seed, worker count, RNG and versions."""
    _write_json(
        out_dir / "manifest.json",
        {
            "command": command,
            "seed": cfg.seed,
            "workers": cfg.workers,
            "rng_algorithm": RNG_ALGORITHM,
            "version": _version(),
            "numpy_version": np.__version__,
            "config": cfg.render(),
        },
    )
    (out_dir / "config.ini").write_text(cfg.render())


def _load_data(cfg, model):
    try:
        return read_dataset(cfg.data_paths(), model.species_names)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_simulate(cfg, out_dir):
    """Simulate paths, write each full trajectory and the noisy dataset."""
    model = cfg.model()
    theta = cfg.floats("simulate", "theta")
    if theta.size != len(model.param_names):
        raise ConfigError(f"[simulate] theta needs {len(model.param_names)} values {model.param_names}")
    if np.any(theta < 0):
        raise ConfigError("[simulate] theta must be non-negative")
    times = cfg.times()
    reps = cfg.getint("simulate", "replicates", minimum=1)
    if model.obs is None:
        raise ConfigError("model has no observation model")
    rng = substream(cfg.seed, STAGE_SIMULATE)
    x0 = cfg.floats("simulate", "x0")
    if x0.size:
        if x0.size != len(model.species_names) or np.any(x0 < 0) or np.any(x0 != np.floor(x0)):
            raise ConfigError(f"[simulate] x0 needs {len(model.species_names)} non-negative integers")
        x0s = np.repeat(x0.astype(np.int64)[None], reps, axis=0)
    else:
        if model.init is None or model.init.needs_observation:
            raise ConfigError("[simulate] x0 is required for this model")
        x0s = model.init.sample(rng, reps)
    values, paths = [], []
    for r in range(reps):
        traj = simulate_direct(model, theta, x0s[r], times[0], times[-1], rng, max_events=cfg.max_events)
        states = states_at_times(traj, times)
        values.append(np.array([corrupt(model.obs, s, rng) for s in states]))
        name = "trajectory.csv" if reps == 1 else f"trajectory_rep{r + 1}.csv"
        traj.to_csv(out_dir / name)
        paths.append(out_dir / name)
    D = Dataset(times, np.stack(values), model.species_names, tuple(model.species_names))
    paths += D.to_csv(out_dir / "data.csv")
    for p in paths:
        print(p)
    return {"theta": theta.tolist(), "x0": x0s.tolist()}


def _write_populations(out_dir, populations):
    for pop in populations:
        pop.to_csv(out_dir / f"population_gen{pop.generation}.csv")
    return {
        "tolerances": [p.tolerance for p in populations],
        "proposals": [p.n_proposals for p in populations],
        "final_mean": populations[-1].mean().tolist(),
    }


def cmd_abc(cfg, out_dir):
    model = cfg.model()
    D = _load_data(cfg, model)
    s = cfg.abc_settings()
    pops = abc_smc(
        model, model.prior, model.obs, D, s["n_generations"], s["n_particles"], s["q"], cfg.seed,
        workers=cfg.workers, max_proposals=s["max_proposals"], max_events=cfg.max_events,
    )
    summary = _write_populations(out_dir, pops)
    for t, (eps, n) in enumerate(zip(summary["tolerances"], summary["proposals"])):
        print(f"generation {t}: eps={eps:.6g} proposals={n}")
    return summary


def _write_chains(out_dir, chains):
    for c in chains:
        if not c.failed:
            c.to_csv(out_dir / f"chain_{c.chain + 1}.csv")
    return {
        "acceptance_rates": [None if c.failed else c.acceptance_rate for c in chains],
        "failures": {str(c.chain + 1): c.error for c in chains if c.failed},
    }


def _chain_summary(out_dir, chains, cov, tuning, theta0):
    summary = _write_chains(out_dir, chains)
    summary.update({
        "proposal_cov": np.asarray(cov).tolist(),
        "n_particles": tuning.n_particles,
        "tuning_trace": [list(t) for t in tuning.trace],
        "theta0": np.asarray(theta0).tolist(),
    })
    for c in chains:
        status = f"failed ({c.error})" if c.failed else f"acceptance {c.acceptance_rate:.3f}"
        print(f"chain {c.chain + 1}: {status}")
    return summary


def cmd_pmcmc(cfg, out_dir):
    """Chains tuned from an existing final ABC population file."""
    model = cfg.model()
    D = _load_data(cfg, model)
    s = cfg.pmcmc_settings()
    pop_path = cfg.get("pmcmc", "population").strip()
    if not pop_path:
        raise ConfigError("[pmcmc] population is required (a population CSV written by 'abc')")
    pop_path = cfg.path(pop_path)
    if not pop_path.is_file():
        raise ConfigError(f"population file not found: {pop_path}")
    pop = WeightedPopulation.from_csv(pop_path)
    prior = model.prior
    if pop.dim != prior.dim:
        raise ConfigError(f"population has {pop.dim} columns, the model has {prior.dim} parameters")
    free = prior.free
    try:
        cov = proposal_cov_from_abc(WeightedPopulation(pop.particles[:, free], pop.weights, pop.distances, pop.tolerance))
    except ValueError as exc:
        raise ConfigError(f"population unusable for proposal tuning: {exc}") from None
    tuning = tune_particles(
        model, prior.to_natural(pop.mean()), model.init, model.obs, D, substream(cfg.seed, STAGE_TUNE),
        target=s["target"], n_min=s["n_min"], n_max=s["n_max"], repeats=s["repeats"], max_events=cfg.max_events,
    )
    starts = pop.particles[pop.draw(substream(cfg.seed, STAGE_INIT), s["n_chains"])]
    configs = [
        ChainConfig(cov, tuning.n_particles, s["n_iterations"], starts[c], cfg.seed, s["thin"], c, s["burn_in"],
                    cfg.max_events)
        for c in range(s["n_chains"])
    ]
    chains = run_chains(configs, model, prior, model.obs, D, cfg.workers)
    summary = _chain_summary(out_dir, chains, cov, tuning, starts)
    if all(c.failed for c in chains):
        raise RuntimeError("every chain failed")
    return summary


def write_diagnostics(out_dir, cfg, model, D, chains, population=None):
    """Pooled samples, R-hat, ACF, posterior predictive and ABC comparison tables."""
    k = cfg.getint("diagnose", "thin", minimum=1)
    max_lag = cfg.getint("diagnose", "max_lag", minimum=0)
    draws = cfg.getint("diagnose", "predictive_draws", minimum=1)
    chains = [thin(c, k) for c in chains if not c.failed]
    if not chains:
        raise RuntimeError("no successful chains to diagnose")
    pooled = pool(chains)
    pooled.to_csv(out_dir / "pooled.csv")
    summary = {"n_pooled": len(pooled), "thin": k}
    lo_hi = pooled.interval(0.95)
    write_table(
        out_dir / "intervals.csv",
        ["parameter", "mean", "q025", "q975"],
        [[n, float(pooled.samples[:, j].mean()), float(lo_hi[j, 0]), float(lo_hi[j, 1])] for j, n in enumerate(pooled.names)],
    )
    n_min = min(len(c) for c in chains)
    if len(chains) >= 2 and n_min >= 10:
        trimmed = [c.samples[:n_min] for c in chains]
        rhat = {n: gelman_rubin([t[:, j] for t in trimmed]) for j, n in enumerate(pooled.names)}
        write_table(out_dir / "rhat.csv", ["parameter", "rhat"], [[n, float(v)] for n, v in rhat.items()])
        summary["max_rhat"] = max(rhat.values())
    first = chains[0]
    lag = min(max_lag, len(first) - 1)
    acf_cols = []
    for j in range(first.samples.shape[1]):
        try:
            acf_cols.append(autocorrelation(first.samples[:, j], lag))
        except ValueError:
            acf_cols.append(np.full(lag + 1, np.nan))
    write_table(
        out_dir / "acf.csv",
        ["lag", *pooled.names],
        [[i, *(float(col[i]) for col in acf_cols)] for i in range(lag + 1)],
    )
    pred = posterior_predictive(
        model, model.obs, pooled, model.init, D.times, draws, cfg.seed, prior=model.prior, workers=cfg.workers,
        max_events=cfg.max_events, observed=D.values[0, 0],
    )
    header, rows = predictive_rows(pred, model.species_names, model.obs)
    write_table(out_dir / "predictive.csv", header, rows)
    summary["predictive_coverage"] = band_coverage(pred, D, model.obs)
    summary["predictive_exploded"] = pred["n_exploded"]
    if population is not None:
        report = compare_abc_pmcmc(population, pooled)
        keys = ["parameter", "abc_mean", "abc_var", "pmcmc_mean", "pmcmc_var", "ks"]
        write_table(out_dir / "compare.csv", keys, [[r[key] for key in keys] for r in report])
        summary["ks"] = {r["parameter"]: r["ks"] for r in report}
    _write_json(out_dir / "diagnostics.json", summary)
    return summary


def cmd_hybrid(cfg, out_dir):
    model = cfg.model()
    D = _load_data(cfg, model)
    a = cfg.abc_settings()
    s = cfg.pmcmc_settings()
    res = hybrid_run(
        model, model.prior, model.obs, D, s["n_chains"], s["n_iterations"], cfg.seed,
        abc_generations=a["n_generations"], abc_particles=a["n_particles"], abc_quantile=a["q"],
        abc_max_proposals=a["max_proposals"], thin=s["thin"], burn_in=s["burn_in"], workers=cfg.workers,
        target=s["target"], n_min=s["n_min"], n_max=s["n_max"], repeats=s["repeats"], max_events=cfg.max_events,
    )
    summary = {"abc": _write_populations(out_dir, res.populations)}
    summary["pmcmc"] = _chain_summary(out_dir, res.chains, res.proposal_cov, res.tuning, res.theta0)
    summary["diagnostics"] = write_diagnostics(out_dir, cfg, model, D, res.chains, res.population)
    return summary


def cmd_diagnose(cfg, out_dir):
    """Diagnostics for the chain files of an earlier run directory."""
    model = cfg.model()
    D = _load_data(cfg, model)
    run_dir = cfg.get("diagnose", "run_dir").strip()
    if not run_dir:
        raise ConfigError("[diagnose] run_dir is required")
    run_dir = cfg.path(run_dir)
    files = sorted(run_dir.glob("chain_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise ConfigError(f"no chain files in {run_dir}")
    chains = [ChainRecord.from_csv(p, chain=int(p.stem.split("_")[1]) - 1) for p in files]
    pops = sorted(run_dir.glob("population_gen*.csv"), key=lambda p: int(p.stem[len("population_gen"):]))
    population = WeightedPopulation.from_csv(pops[-1]) if pops else None
    return write_diagnostics(out_dir, cfg, model, D, chains, population)


COMMANDS = {
    "simulate": cmd_simulate,
    "abc": cmd_abc,
    "pmcmc": cmd_pmcmc,
    "hybrid": cmd_hybrid,
    "diagnose": cmd_diagnose,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
    common.add_argument("--workers", type=int, help="worker threads (overrides [run] workers)")
    common.add_argument("--out-dir", default="out", help="output directory (default: out)")
    common.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser = argparse.ArgumentParser(prog="abcpmcmc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__.splitlines()[0] if fn.__doc__ else name)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        cfg = load_config(args.config, args.seed, args.workers)
        if args.print_config:
            sys.stdout.write(cfg.render())
            return EXIT_OK
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](cfg, out_dir)
        summary = {"command": args.command, "seed": cfg.seed, **(summary or {})}
        _write_json(out_dir / "summary.json", summary)
        write_manifest(out_dir, args.command, cfg)
        print(f"seed {cfg.seed}; outputs in {out_dir}")
        return EXIT_OK
    except (ConfigError, ModelSyntaxError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
