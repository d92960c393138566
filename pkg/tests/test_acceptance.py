"""Acceptance criteria at their stated configurations and tolerances.

Each test prints one ``[PASS|FAIL] criterion n`` line; the lines are repeated
in the terminal summary.
"""

import time

import numpy as np
import pytest
from conftest import ACC_M, ACC_SEED, ACC_T, record_criterion
from oracles import forward_filter, two_state_milstein

from hmmle.asymptotics import (
    lln_scaling_check,
    run_consistency_study,
    run_identifiability_study,
    run_moment_study,
    run_normality_study,
)
from hmmle.cli import main
from hmmle.estimate import curvature_to_fisher, fit_log_profile_curvature
from hmmle.filter import run_filter, run_sensitivity_filter
from hmmle.rng import make_rng, stream_ids
from hmmle.simulate import simulate_observations
from hmmle.stability import contraction_study, coupling_tail_check

pytestmark = pytest.mark.slow


def test_criterion_01_filter_oracle(two_state):
    t0 = time.perf_counter()
    lam = two_state.lam(1.0)
    gaps = {1: [], 2: []}
    for s in stream_ids(ACC_SEED, 20):
        # simulate at dt/2 and aggregate, so both grids see the same signal
        _, fine = simulate_observations(two_state, 1.0, 10.0, 5e-4, make_rng(s))
        for k, obs in ((1, fine.coarsen(2)), (2, fine)):
            pis = run_filter(two_state, 1.0, obs).pis
            ref, _ = forward_filter(lam, two_state.h, obs.increments, obs.dt, two_state.nu)
            gaps[k].append(np.max(np.abs(pis - ref)))
    secs = time.perf_counter() - t0
    worst = max(gaps[1])
    ratio = np.mean(gaps[1]) / np.mean(gaps[2])
    ok = worst <= 0.01 and 1.5 <= ratio <= 2.5 and secs < 10
    record_criterion(1, "filter vs forward oracle", ok,
                     f"max gap {worst:.2e} (<= 0.01), halving ratio {ratio:.2f} "
                     f"(in [1.5, 2.5]), {secs:.1f} s (< 10)")
    assert ok


def test_criterion_02_contraction(two_state):
    t0 = time.perf_counter()
    rep = contraction_study(two_state, 1.0, 15.0, 1e-3, 100, ACC_SEED)
    secs = time.perf_counter() - t0
    agg = rep.aggregates
    ok = (agg["pathwise_fraction"] >= 0.99 and agg["mean_fitted_rate"] <= -1.8
          and secs < 30)
    record_criterion(2, "contraction", ok,
                     f"pathwise bound on {agg['pathwise_fraction']:.0%} of paths (>= 99%), "
                     f"fitted rate {agg['mean_fitted_rate']:.3f} (<= -1.8), {secs:.1f} s (< 30)")
    assert ok


def test_criterion_03_coupling(two_state):
    t0 = time.perf_counter()
    rep = coupling_tail_check(two_state.generator(1.0), 10.0, 10_000, ACC_SEED)
    secs = time.perf_counter() - t0
    ks = rep.aggregates["ks_distance"]
    ok = rep.aggregates["rate"] == 2.0 and ks <= 0.05 and secs < 10
    record_criterion(3, "coupling tail", ok,
                     f"KS {ks:.4f} vs Exponential(2) (<= 0.05), {secs:.1f} s (< 10)")
    assert ok


def test_criterion_04_consistency(two_state, shared_mle):
    recs, secs_by_T = shared_mle
    M = 100
    reps = {T: recs[T][:M] for T in ACC_T}
    rep = run_consistency_study(two_state, 1.0, ACC_T, M, ACC_SEED, eps_list=(0.1,),
                                replications=reps)
    probs = rep.aggregates["exceedance"]["0.1"]
    secs = sum(secs_by_T.values()) * M / ACC_M
    final = probs["400"]
    ok = rep.verdicts["monotone_eps_0.1"] and final <= 0.15 and secs < 300
    record_criterion(4, "consistency", ok,
                     "P(|err| >= 0.1) = " + ", ".join(f"{v:.2f}@{k}" for k, v in probs.items())
                     + f"; monotone {rep.verdicts['monotone_eps_0.1']}, final {final:.2f} "
                     f"(<= 0.15), {secs:.0f} s (< 300)")
    assert ok


def test_criterion_05_normality(two_state, shared_mle, fisher_pool):
    recs, secs_by_T = shared_mle
    pool, fisher_secs = fisher_pool
    rep = run_normality_study(two_state, 1.0, 400.0, ACC_M, ACC_SEED, fisher=pool,
                              replications=recs[400.0])
    agg = rep.aggregates
    crit = agg["ks_critical"]["0.01"]
    se3 = 3 / np.sqrt(ACC_M)
    secs = secs_by_T[400.0] + fisher_secs
    ok = (agg["ks_statistic"] <= crit and abs(agg["xi_mean"]) <= se3 and secs < 600)
    record_criterion(5, "asymptotic normality", ok,
                     f"KS {agg['ks_statistic']:.3f} (<= {crit:.3f}), mean {agg['xi_mean']:.3f} "
                     f"(|.| <= {se3:.3f}), I = {pool.mean:.4f}, boundary hits "
                     f"{agg['boundary_fraction']:.0%}, {secs:.0f} s on one core (< 600)")
    assert ok


def test_criterion_06_moments(two_state, shared_mle, fisher_pool):
    recs, _ = shared_mle
    pool, _ = fisher_pool
    rep = run_moment_study(two_state, 1.0, (100.0, 400.0), ACC_M, [1, 2, 4], ACC_SEED,
                           fisher=pool, replications={T: recs[T] for T in (100.0, 400.0)})
    r2 = rep.aggregates["ratios"]["2"]
    ok = rep.verdicts["p2_ratio_final_in_band"] and rep.verdicts["p2_trend_to_1"]
    record_criterion(6, "moment convergence", ok,
                     f"p=2 ratio {r2['100']:.2f}@100 -> {r2['400']:.2f}@400 "
                     f"(final in [0.7, 1.3], |ratio-1| non-increasing within 0.1)")
    assert ok


def test_criterion_07_fisher(fisher_pool, curvature_profiles):
    pool, pool_secs = fisher_pool
    profs, prof_secs = curvature_profiles
    curv = np.mean([curvature_to_fisher(fit_log_profile_curvature(p)) for p in profs])
    rel = curv / pool.mean - 1
    secs = pool_secs + prof_secs
    ok = pool.mean > 0 and pool.cv <= 0.15 and abs(rel) <= 0.15 and secs < 120
    record_criterion(7, "Fisher information", ok,
                     f"pooled I {pool.mean:.5f} (> 0), CV {pool.cv:.1%} (<= 15%), curvature "
                     f"estimate {curv:.5f} ({rel:+.1%}, within 15%), {secs:.0f} s (< 120)")
    assert ok


def test_criterion_08_lln(two_state):
    t0 = time.perf_counter()
    rep = lln_scaling_check(two_state, 1.0, 1.5, [50, 100, 200, 400], 200, ACC_SEED)
    secs = time.perf_counter() - t0
    ratios = rep.aggregates["ratios"]
    ok = rep.passed and secs < 300
    record_criterion(8, "LLN scaling", ok,
                     "V(2T)/V(T) = " + ", ".join(f"{v:.2f} ({k})" for k, v in ratios.items())
                     + f" (in [0.35, 0.65]), {secs:.0f} s (< 300)")
    assert ok


def test_criterion_09_identifiability(two_state):
    t0 = time.perf_counter()
    rep = run_identifiability_study(two_state, 1.0, [1.25, 1.5, 2.0, 3.0], 10, ACC_SEED,
                                    T_burn=50.0, T_avg=500.0)
    secs = time.perf_counter() - t0
    agg = rep.aggregates
    z = min(m / s for m, s in zip(agg["g_mean"], agg["g_se"]))
    ok = rep.passed and secs < 120
    record_criterion(9, "identifiability", ok,
                     "g = " + ", ".join(f"{g:.2e}" for g in agg["g_mean"])
                     + f"; min z {z:.1f} (>= 5), increasing "
                     f"{rep.verdicts['increasing_in_separation']}, {secs:.0f} s (< 120)")
    assert ok


def test_criterion_10_sensitivity(two_state):
    t0 = time.perf_counter()
    _, obs = simulate_observations(two_state, 1.0, 10.0, 1e-3, make_rng(ACC_SEED))
    eps = 1e-5
    fd = (run_filter(two_state, 1.0 + eps, obs).pis
          - run_filter(two_state, 1.0 - eps, obs).pis) / (2 * eps)
    fd_err = np.max(np.abs(fd - run_sensitivity_filter(two_state, 1.0, obs).sensitivity))
    # reference: Milstein integration of the filter and its derivative on a 16x finer grid
    errs = {1: [], 2: []}
    for s in stream_ids(ACC_SEED, 20):
        _, fine = simulate_observations(two_state, 1.0, 10.0, 1e-3 / 16, make_rng(s))
        _, q = two_state_milstein(1.0, fine.increments, fine.dt, two_state.nu[1])
        for k, factor in ((1, 16), (2, 8)):
            sens = run_sensitivity_filter(two_state, 1.0, fine.coarsen(factor)).sensitivity
            errs[k].append(np.max(np.abs(sens[:, 1] - q[::factor])))
    secs = time.perf_counter() - t0
    ratio = np.mean(errs[1]) / np.mean(errs[2])
    ok = fd_err <= 1e-4 and 1.4 <= ratio <= 2.6 and secs < 30
    record_criterion(10, "sensitivity", ok,
                     f"finite-difference gap {fd_err:.1e} (<= 1e-4), reference error halving "
                     f"ratio {ratio:.2f} (in [1.4, 2.6]), {secs:.1f} s (< 30)")
    assert ok


def test_criterion_11_determinism(tmp_path):
    model = tmp_path / "two_state.model"
    model.write_text("family = two_state\ntheta_min = 0.1\ntheta_max = 5.0\nnu = 0.5, 0.5\n")
    cfgs = {
        "simulate": "run.theta0 = 1.0\nrun.T = 10\n",
        "estimate": "run.theta0 = 1.0\nrun.T = 50\n",
        "study-consistency": "run.theta0 = 1.0\nrun.T_list = 10, 20\nrun.M = 50\n",
        "identifiability": "run.theta0 = 1.0\nrun.theta_grid = 1.5, 3\nrun.n_seeds = 3\n",
    }
    same = {}
    for cmd, body in cfgs.items():
        f = tmp_path / f"{cmd}.cfg"
        f.write_text(f"model.file = two_state.model\nrun.seed = {ACC_SEED}\n{body}")
        outs = []
        for run, workers in (("a", 1), ("b", 1), ("c", 2)):
            out = tmp_path / f"{cmd}-{run}"
            assert main([cmd, "--config", str(f), "--out", str(out),
                         "--workers", str(workers)]) == 0
            outs.append(sorted(p for p in out.glob("*.csv")))
        same[cmd] = all(p.read_bytes() == q.read_bytes()
                        for other in outs[1:] for p, q in zip(outs[0], other))
    ok = all(same.values())
    record_criterion(11, "determinism", ok,
                     "byte-identical CSVs over 3 runs (workers 1, 1, 2): "
                     + ", ".join(f"{k} {v}" for k, v in same.items()))
    assert ok
