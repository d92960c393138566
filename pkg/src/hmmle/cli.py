"""Batch experiment runner.

Usage::

    hmmle <command> --config FILE [--seed N] [--out DIR] [--workers K]
    hmmle --version

Every run writes ``report.json``, ``records.csv``, command-specific CSV tables
and ``manifest.json`` into the output directory. Exit status is 0 on success,
1 for invalid input (including violated preconditions) and 2 for other
failures during the run.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import (lln_scaling_check, run_consistency_study, run_identifiability_study,
                          run_moment_study, run_normality_study)
from .config import COMMANDS, ConfigError, ExperimentConfig, load_config
from .estimate import (DEFAULT_U_GRID, curvature_to_fisher, estimate_mle, fit_log_profile_curvature,
                       likelihood_profile, pooled_fisher)
from .filter import run_filter, run_sensitivity_filter, tangent_trajectory
from .report import McReport, write_report
from .rng import horizon_tag, make_rng, stream_id
from .simulate import read_obs_csv, simulate_observations
from .stability import contraction_check, run_stability_suite

__all__ = ["main", "run_experiment", "EXIT_OK", "EXIT_INVALID", "EXIT_RUNTIME"]

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _observations(cfg: ExperimentConfig, theta_true: float):
    """Observations from ``run.obs_file`` or simulated on replicate stream 0."""
    p = cfg.params
    if p.get("obs_file"):
        return None, read_obs_csv(p["obs_file"], p["dt"])
    rng = make_rng(stream_id(cfg.seed, 0), horizon_tag(p["T"]))
    return simulate_observations(cfg.model, theta_true, p["T"], p["dt"], rng)


def _rows(arr, times=None):
    for k, row in enumerate(arr):
        yield ([times[k]] if times is not None else []) + [float(x) for x in np.atleast_1d(row)]


def _simulate(cfg):
    p = cfg.params
    path, obs = _observations(cfg, p["theta0"])
    chain = [[0.0, int(path.states[0])]] + [[float(t), int(s)] for t, s in
                                            zip(path.jump_times, path.states[1:])]
    tables = {"chain.csv": (["jump_time", "state"], chain),
              "obs.csv": (["k", "dx"], ([k, float(x)] for k, x in enumerate(obs.increments)))}
    agg = {"n_jumps": len(path.jump_times), "n_steps": obs.n_steps}
    return McReport("simulate", cfg.snapshot(), [], agg, {}), tables


def _filter(cfg):
    p = cfg.params
    _, obs = _observations(cfg, p["theta0"] if p["theta0"] is not None else p["theta"])
    fn = run_sensitivity_filter if p["sensitivity"] else run_filter
    run = fn(cfg.model, p["theta"], obs, p["init"])
    d = cfg.model.dim
    header = ["k", "t"] + [f"pi_{i}" for i in range(d)] + ["loglik_partial"]
    if run.sensitivity is not None:
        header += [f"dpi_{i}" for i in range(d)]

    def rows():
        for k in range(run.pis.shape[0]):
            row = [k, k * run.dt, *run.pis[k].tolist(), float(run.loglik_partial[k])]
            if run.sensitivity is not None:
                row += run.sensitivity[k].tolist()
            yield row

    agg = {"loglik": run.loglik, "n_clamped": run.n_clamped, "n_steps": run.n_steps}
    return McReport("filter", cfg.snapshot(), [], agg, {}), {"filter.csv": (header, rows())}


def _estimate(cfg):
    p = cfg.params
    _, obs = _observations(cfg, p["theta0"])
    res = estimate_mle(cfg.model, obs, p["grid_size"], p["refine_tol"], p["eta"])
    rec = {"replicate": 0, "seed": stream_id(cfg.seed, 0), "theta_hat": res.theta_hat,
           "loglik_at_hat": res.loglik_at_hat, "at_boundary": res.at_boundary,
           "n_evals": res.n_evals}
    agg = {"theta_hat": res.theta_hat, "eta": res.eta, "at_boundary": res.at_boundary}
    tables = {"mle.csv": (["theta", "loglik"], res.profile)}
    return McReport("estimate", cfg.snapshot(), [rec], agg, {}), tables


def _fisher(cfg):
    p = cfg.params
    pool = pooled_fisher(cfg.model, p["theta0"], p["T"], p["dt"], p["fisher_runs"], cfg.seed)
    records = [{"replicate": i, "value": v} for i, v in enumerate(pool.values)]
    agg = {"fisher_pooled": pool.mean,
           "cv": pool.cv if len(pool.values) > 1 else math.nan}
    return McReport("fisher", cfg.snapshot(), records, agg, {}), {}


def _profile(cfg):
    p = cfg.params
    _, obs = _observations(cfg, p["theta0"])
    prof = likelihood_profile(cfg.model, p["theta0"], obs, p["u_grid"] or DEFAULT_U_GRID)
    c2 = fit_log_profile_curvature(prof)
    agg = {"c2": c2, "fisher_curvature": curvature_to_fisher(c2), "dropped_u": prof.dropped}
    return (McReport("profile", cfg.snapshot(), [], agg, {}),
            {"profile.csv": (["u", "logZ"], prof.points)})


def _study_kwargs(cfg):
    p = cfg.params
    return {"dt": p["dt"], "grid_size": p["grid_size"], "refine_tol": p["refine_tol"],
            "workers": cfg.workers}


def _consistency(cfg):
    p = cfg.params
    return run_consistency_study(cfg.model, p["theta0"], p["T_list"], p["M"], cfg.seed,
                                 eps_list=p["eps_list"], **_study_kwargs(cfg)), {}


def _normality(cfg):
    p = cfg.params
    return run_normality_study(cfg.model, p["theta0"], p["T"], p["M"], cfg.seed,
                               fisher_runs=p["fisher_runs"], **_study_kwargs(cfg)), {}


def _moments(cfg):
    p = cfg.params
    return run_moment_study(cfg.model, p["theta0"], p["T_list"], p["M"], p["p_list"], cfg.seed,
                            fisher_runs=p["fisher_runs"], **_study_kwargs(cfg)), {}


def _lln(cfg):
    p = cfg.params
    return lln_scaling_check(cfg.model, p["theta0"], p["theta"], p["T_list"], p["M"], cfg.seed,
                             dt=p["dt"], pilot_T_burn=p["pilot_T_burn"],
                             pilot_T_avg=p["pilot_T_avg"], workers=cfg.workers), {}


def _identifiability(cfg):
    p = cfg.params
    m = cfg.model
    T_burn = p["T_burn"] or 10.0 / m.gamma(m.theta_min)
    T_avg = p["T_avg"] or 10.0 * T_burn
    return run_identifiability_study(m, p["theta0"], p["theta_grid"], p["n_seeds"], cfg.seed,
                                     T_burn=T_burn, T_avg=T_avg, dt=p["dt"],
                                     workers=cfg.workers), {}


def _stability(cfg):
    p = cfg.params
    m = cfg.model
    report = run_stability_suite(
        m, p["theta"], cfg.seed, dt=p["dt"], n_paths=p["n_paths"],
        T_contraction=p["T_contraction"], robustness_offsets=p["robustness_offsets"],
        T_robust=p["T_robust"], M_robust=p["M_robust"], T_boundary=p["T_boundary"],
        M_boundary=p["M_boundary"], m_list=p["m_list"], T_coupling=p["T_coupling"],
        N_coupling=p["N_coupling"], workers=cfg.workers)
    # one example path for the distance and tangent-norm curves
    rng = make_rng(stream_id(cfg.seed, 0), horizon_tag(p["T_contraction"]))
    _, obs = simulate_observations(m, p["theta"], p["T_contraction"], p["dt"], rng)
    mu1, mu2 = report.config["contraction"]["mu1"], report.config["contraction"]["mu2"]
    res = contraction_check(m, p["theta"], obs, mu1, mu2)
    v = np.asarray(mu1) - np.asarray(mu2)
    _, qs = tangent_trajectory(m, p["theta"], obs, mu1, v)
    taus = [r["tau"] for r in report.records if r["check"] == "coupling"]
    tables = {
        "distance.csv": (["t", "distance"], _rows(res.distances, res.times.tolist())),
        "tangent.csv": (["t", "tangent_norm"],
                        _rows(np.abs(qs).sum(axis=1), res.times.tolist())),
        "tau.csv": (["tau"], ([t] for t in taus)),
    }
    return report, tables


HANDLERS = {
    "simulate": _simulate, "filter": _filter, "estimate": _estimate, "fisher": _fisher,
    "profile": _profile, "study-consistency": _consistency, "study-normality": _normality,
    "study-moments": _moments, "study-lln": _lln, "stability-suite": _stability,
    "identifiability": _identifiability,
}
assert set(HANDLERS) == set(COMMANDS)


def run_experiment(cfg: ExperimentConfig) -> list[Path]:
    """Execute ``cfg`` and write its artifacts; returns the written files."""
    start = time.perf_counter()
    report, tables = HANDLERS[cfg.command](cfg)
    if "command" not in report.config:
        report.config["experiment"] = cfg.snapshot()
    files = write_report(report, cfg.out_dir, tables)
    manifest = {
        "command": cfg.command,
        "version": __version__,
        "config": cfg.snapshot(),
        "config_file": str(cfg.source) if cfg.source else None,
        "wall_time_s": time.perf_counter() - start,
        "verdicts": report.verdicts,
        "files": [f.name for f in files] + ["manifest.json"],
    }
    target = Path(cfg.out_dir) / "manifest.json"
    try:
        target.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {target}: {exc}") from exc
    return files + [target]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hmmle", description="Likelihood estimation for hidden Markov models "
                 "observed in white noise: simulation, filtering and Monte Carlo studies.")
    ap.add_argument("--version", action="version", version=f"hmmle {__version__}")
    ap.add_argument("command", help="one of: " + ", ".join(COMMANDS))
    ap.add_argument("--config", required=True, help="experiment file (key = value)")
    ap.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    ap.add_argument("--out", help="output directory (overrides output.dir)")
    ap.add_argument("--workers", type=int, help="replication threads (overrides run.workers)")
    return ap


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        cfg = load_config(args.command, args.config, seed=args.seed, out=args.out,
                          workers=args.workers)
    except ConfigError as exc:
        print(f"hmmle: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        files = run_experiment(cfg)
    except ValueError as exc:  # preconditions checked by the library
        print(f"hmmle: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # reported with its type; exit status tells callers apart
        print(f"hmmle: {cfg.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{cfg.command}: wrote {len(files)} files to {cfg.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
