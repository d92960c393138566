"""Monte Carlo studies of consistency, normality and moment convergence of the MLE.

Every study is a pure function of ``(model, configuration, base_seed)``. Replicate
``i`` at horizon ``T`` draws from the Philox stream keyed by
``(stream_id(base_seed, i), horizon_tag(T))``, so two studies with the same seed
and horizon share their replications. Records are sorted by replicate index
before any reduction, and each verdict can be recomputed from the records plus
the configuration snapshot.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import stats

from .estimate import DEFAULT_GRID_SIZE, DEFAULT_REFINE_TOL, FisherPool, estimate_mle, pooled_fisher
from .filter import gap_sums
from .model import ParamModel
from .report import McReport
from .rng import horizon_tag, make_rng, mix64, stream_ids
from .simulate import n_grid_steps, observation_segments, sample_chain_path, simulate_observations

# Asymptotic Kolmogorov quantiles: critical value of sqrt(M) * D_M.
KS_CRIT = {0.05: 1.36, 0.01: 1.63}
MAX_FAIL_FRACTION = 0.01
PILOT_SALT = 0x9111_07A5_0000_0002

__all__ = [
    "KS_CRIT",
    "StudyError",
    "gaussian_abs_moment",
    "ks_critical",
    "mle_replications",
    "run_consistency_study",
    "run_normality_study",
    "run_moment_study",
    "lln_scaling_check",
    "identifiability_curve",
    "run_identifiability_study",
]


class StudyError(RuntimeError):
    """Raised when too many replications fail."""


def gaussian_abs_moment(p: float) -> float:
    """``E|N(0,1)|**p = 2**(p/2) Gamma((p+1)/2) / sqrt(pi)``."""
    return 2.0 ** (p / 2) * math.gamma((p + 1) / 2) / math.sqrt(math.pi)


def ks_critical(M: int, alpha: float) -> float:
    return KS_CRIT[alpha] / math.sqrt(M)


def _map_replicates(fn, M: int, workers: int, label: str) -> list[dict]:
    """Run ``fn(i)`` for ``i < M``; failed replicates become records with an ``error``."""

    def safe(i):
        try:
            return fn(i)
        except Exception as exc:  # recorded, then judged against the failure budget
            return {"replicate": i, "error": f"{type(exc).__name__}: {exc}"}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(safe, range(M)))
    else:
        records = [safe(i) for i in range(M)]
    records.sort(key=lambda r: r["replicate"])
    failed = [r for r in records if r.get("error")]
    if len(failed) > MAX_FAIL_FRACTION * M:
        detail = "; ".join(f"#{r['replicate']}: {r['error']}" for r in failed[:5])
        raise StudyError(f"{label}: {len(failed)} of {M} replications failed ({detail})")
    return records


def _check_M(M: int, minimum: int) -> None:
    if M < minimum:
        raise ValueError(f"M must be at least {minimum}, got {M}")


def _check_increasing(T_list) -> list[float]:
    T_list = [float(t) for t in T_list]
    if not T_list or any(b <= a for a, b in zip(T_list, T_list[1:])) or T_list[0] <= 0:
        raise ValueError(f"T_list must be positive and strictly increasing, got {T_list}")
    return T_list


def mle_replications(model: ParamModel, theta0: float, T: float, M: int, base_seed: int, *,
                     dt: float = 1e-3, grid_size: int = DEFAULT_GRID_SIZE,
                     refine_tol: float = DEFAULT_REFINE_TOL, workers: int = 1) -> list[dict]:
    """``M`` independent simulate-then-estimate replications at horizon ``T``."""
    theta0 = model.check_theta(theta0)
    n_grid_steps(T, dt)
    seeds = stream_ids(base_seed, M)
    tag = horizon_tag(T)

    def one(i):
        _, obs = simulate_observations(model, theta0, T, dt, make_rng(seeds[i], tag))
        res = estimate_mle(model, obs, grid_size, refine_tol)
        return {"T": T, "replicate": i, "seed": seeds[i], "theta_hat": res.theta_hat,
                "loglik_at_hat": res.loglik_at_hat, "at_boundary": res.at_boundary,
                "n_evals": res.n_evals, "error": ""}

    records = _map_replicates(one, M, workers, f"MLE replications at T={T}")
    for r in records:
        r.setdefault("T", T)
        r.setdefault("seed", seeds[r["replicate"]])
    return records


def _ok(records):
    return [r for r in records if not r.get("error")]


def _config(model, theta0, M, base_seed, dt, **extra) -> dict:
    return {"model": model.describe(), "theta0": theta0, "M": M, "base_seed": base_seed,
            "dt": dt, **extra}


def exceedance_monotone(probs, M: int) -> bool:
    """Weakly decreasing, allowing one increase within two binomial standard errors."""
    inversions = 0
    for a, b in zip(probs, probs[1:]):
        if b > a:
            se = math.sqrt((a * (1 - a) + b * (1 - b)) / M)
            if b - a > 2 * se:
                return False
            inversions += 1
    return inversions <= 1


def run_consistency_study(model: ParamModel, theta0: float, T_list, M: int, base_seed: int, *,
                          dt: float = 1e-3, eps_list=(0.05, 0.1, 0.2),
                          grid_size: int = DEFAULT_GRID_SIZE,
                          refine_tol: float = DEFAULT_REFINE_TOL, workers: int = 1,
                          replications: dict | None = None) -> McReport:
    """Empirical ``P(|theta_hat - theta0| >= eps)`` at each horizon.

    ``replications`` may map horizons to precomputed records of
    :func:`mle_replications` with the same seed.
    """
    _check_M(M, 50)
    T_list = _check_increasing(T_list)
    theta0 = model.check_theta(theta0)
    replications = replications or {}
    records = []
    for T in T_list:
        recs = replications.get(T) or mle_replications(
            model, theta0, T, M, base_seed, dt=dt, grid_size=grid_size,
            refine_tol=refine_tol, workers=workers)
        records += recs
    agg: dict = {"exceedance": {}}
    verdicts = {}
    for eps in eps_list:
        probs = []
        for T in T_list:
            err = np.array([abs(r["theta_hat"] - theta0) for r in _ok(records) if r["T"] == T])
            probs.append(float(np.mean(err >= eps)))
        agg["exceedance"][f"{eps:g}"] = dict(zip([f"{T:g}" for T in T_list], probs))
        verdicts[f"monotone_eps_{eps:g}"] = exceedance_monotone(probs, M)
    cfg = _config(model, theta0, M, base_seed, dt, T_list=T_list, eps_list=list(eps_list),
                  grid_size=grid_size, refine_tol=refine_tol)
    return McReport("consistency", cfg, records, agg, verdicts)


def _fisher_pool(model, theta0, T, dt, fisher, fisher_runs, base_seed) -> FisherPool:
    if fisher is None:
        return pooled_fisher(model, theta0, T, dt, fisher_runs, base_seed)
    if isinstance(fisher, FisherPool):
        return fisher
    return FisherPool([float(fisher)], T, dt)


def _standardize(records, theta0, fisher_value):
    for r in records:
        if r.get("error"):
            r["xi"] = math.nan
        else:
            r["xi"] = math.sqrt(r["T"]) * (r["theta_hat"] - theta0) * math.sqrt(fisher_value)


def run_normality_study(model: ParamModel, theta0: float, T: float, M: int, base_seed: int, *,
                        dt: float = 1e-3, fisher=None, fisher_runs: int = 20,
                        grid_size: int = DEFAULT_GRID_SIZE,
                        refine_tol: float = DEFAULT_REFINE_TOL, workers: int = 1,
                        replications: list[dict] | None = None) -> McReport:
    """KS test of ``xi = sqrt(T) (theta_hat - theta0) sqrt(I)`` against ``N(0, 1)``.

    ``I`` is pooled over ``fisher_runs`` dedicated paths of length ``T`` unless
    ``fisher`` (a :class:`FisherPool` or a number) is given.
    """
    _check_M(M, 200)
    theta0 = model.check_theta(theta0)
    pool = _fisher_pool(model, theta0, T, dt, fisher, fisher_runs, base_seed)
    records = [dict(r) for r in (replications or mle_replications(
        model, theta0, T, M, base_seed, dt=dt, grid_size=grid_size,
        refine_tol=refine_tol, workers=workers))]
    _standardize(records, theta0, pool.mean)
    ok = _ok(records)
    xi = np.array([r["xi"] for r in ok])
    ks = stats.kstest(xi, "norm")
    boundary = float(np.mean([r["at_boundary"] for r in ok]))
    agg = {
        "fisher_pooled": pool.mean,
        "fisher_values": list(pool.values),
        "fisher_cv": pool.cv if len(pool.values) > 1 else math.nan,
        "ks_statistic": float(ks.statistic),
        "ks_pvalue": float(ks.pvalue),
        "ks_critical": {f"{a:g}": ks_critical(len(xi), a) for a in KS_CRIT},
        "xi_mean": float(xi.mean()),
        "xi_var": float(xi.var(ddof=1)),
        "boundary_fraction": boundary,
        "n_failed": len(records) - len(ok),
    }
    verdicts = {
        "ks_within_1pct_critical": agg["ks_statistic"] <= ks_critical(len(xi), 0.01),
        "mean_within_3_se": abs(agg["xi_mean"]) <= 3.0 / math.sqrt(len(xi)),
        "boundary_fraction_below_2pct": boundary < 0.02,
    }
    cfg = _config(model, theta0, M, base_seed, dt, T=T, fisher_runs=len(pool.values),
                  fisher_T=pool.T, grid_size=grid_size, refine_tol=refine_tol)
    return McReport("normality", cfg, records, agg, verdicts)


def run_moment_study(model: ParamModel, theta0: float, T_list, M: int, p_list, base_seed: int, *,
                     dt: float = 1e-3, fisher=None, fisher_runs: int = 20,
                     grid_size: int = DEFAULT_GRID_SIZE,
                     refine_tol: float = DEFAULT_REFINE_TOL, workers: int = 1,
                     replications: dict | None = None) -> McReport:
    """Empirical ``E|xi|**p`` per horizon against the Gaussian absolute moments.

    The Fisher pool is computed at the largest horizon unless given.
    """
    _check_M(M, 200)
    T_list = _check_increasing(T_list)
    p_list = [int(p) for p in p_list]
    if not p_list or not set(p_list) <= {1, 2, 4}:
        raise ValueError(f"p_list must be a nonempty subset of {{1, 2, 4}}, got {p_list}")
    theta0 = model.check_theta(theta0)
    pool = _fisher_pool(model, theta0, T_list[-1], dt, fisher, fisher_runs, base_seed)
    replications = replications or {}
    records = []
    for T in T_list:
        recs = replications.get(T) or mle_replications(
            model, theta0, T, M, base_seed, dt=dt, grid_size=grid_size,
            refine_tol=refine_tol, workers=workers)
        records += [dict(r) for r in recs]
    _standardize(records, theta0, pool.mean)
    moments: dict = {}
    ratios: dict = {}
    for p in p_list:
        target = gaussian_abs_moment(p)
        moments[str(p)] = {}
        ratios[str(p)] = {}
        for T in T_list:
            xi = np.array([r["xi"] for r in _ok(records) if r["T"] == T])
            m = float(np.mean(np.abs(xi) ** p))
            moments[str(p)][f"{T:g}"] = m
            ratios[str(p)][f"{T:g}"] = m / target
    agg = {"fisher_pooled": pool.mean, "fisher_values": list(pool.values),
           "gaussian_moments": {str(p): gaussian_abs_moment(p) for p in p_list},
           "moments": moments, "ratios": ratios}
    verdicts = {}
    first, last = f"{T_list[0]:g}", f"{T_list[-1]:g}"
    if 2 in p_list:
        verdicts["p2_ratio_final_in_band"] = 0.7 <= ratios["2"][last] <= 1.3
    for p in p_list:
        r = ratios[str(p)]
        verdicts[f"p{p}_trend_to_1"] = abs(r[last] - 1) <= abs(r[first] - 1) + 0.1
    cfg = _config(model, theta0, M, base_seed, dt, T_list=T_list, p_list=p_list,
                  fisher_runs=len(pool.values), fisher_T=pool.T, grid_size=grid_size,
                  refine_tol=refine_tol)
    return McReport("moments", cfg, records, agg, verdicts)


def _long_gap_average(model, theta0, thetas, T_burn, T_avg, dt, rng, chunk_steps=1 << 20):
    """Time averages of ``(h.pi^theta - h.pi^theta0)**2`` over ``[T_burn, T_burn + T_avg]``."""
    T = T_burn + T_avg
    n_burn = n_grid_steps(T_burn, dt)
    n_total = n_grid_steps(T, dt)
    path = sample_chain_path(model.generator(theta0), model.nu, T, rng)
    segs = observation_segments(path, model.h, dt, rng, chunk_steps)
    sums = gap_sums(model, [theta0, *thetas], segs, dt, [n_burn, n_total])
    return (sums[1:, 1] - sums[1:, 0]) / T_avg


def identifiability_curve(model: ParamModel, theta0: float, theta_grid, T_burn: float,
                          T_avg: float, dt: float, rng: np.random.Generator):
    """Estimate ``g(theta0, theta)`` for each ``theta`` of ``theta_grid`` from one long path.

    The filters under ``theta0`` and ``theta`` share the observations of a path
    generated under ``theta0``; the burn-in lets both forget their start.
    Returns a list of ``(theta, g_hat)``.
    """
    theta0 = model.check_theta(theta0)
    thetas = [model.check_theta(t) for t in theta_grid]
    gamma_min = model.gamma(model.theta_min)
    if T_burn < 10.0 / gamma_min * (1 - 1e-12):
        raise ValueError(f"T_burn={T_burn} is shorter than 10/gamma(theta_min)={10 / gamma_min:g}")
    if T_avg < 10.0 * T_burn * (1 - 1e-12):
        raise ValueError(f"T_avg={T_avg} is shorter than 10*T_burn={10 * T_burn:g}")
    g = _long_gap_average(model, theta0, thetas, T_burn, T_avg, dt, rng)
    return [(t, float(v)) for t, v in zip(thetas, g)]


def _monotone_in_separation(theta0, thetas, means) -> bool:
    """Strictly increasing in ``|theta - theta0|`` on each side of ``theta0``."""
    for side in (1, -1):
        pts = sorted((abs(t - theta0), m) for t, m in zip(thetas, means) if side * (t - theta0) > 0)
        if any(b[1] <= a[1] for a, b in zip(pts, pts[1:])):
            return False
    return True


def run_identifiability_study(model: ParamModel, theta0: float, theta_grid, n_seeds: int,
                              base_seed: int, *, T_burn: float, T_avg: float,
                              dt: float = 1e-3, min_separation: float = 0.25,
                              n_se: float = 5.0, workers: int = 1) -> McReport:
    """:func:`identifiability_curve` over ``n_seeds`` independent paths."""
    if n_seeds < 2:
        raise ValueError(f"n_seeds must be at least 2, got {n_seeds}")
    thetas = [float(t) for t in theta_grid]
    seeds = stream_ids(base_seed, n_seeds)
    tag = horizon_tag(T_burn + T_avg)

    def one(i):
        curve = identifiability_curve(model, theta0, thetas, T_burn, T_avg, dt,
                                      make_rng(seeds[i], tag))
        return {"replicate": i, "seed": seeds[i], "error": "",
                **{f"g_{t:g}": g for t, g in curve}}

    records = _map_replicates(one, n_seeds, workers, "identifiability")
    for r in records:
        r.setdefault("seed", seeds[r["replicate"]])
    ok = _ok(records)
    means, ses = [], []
    for t in thetas:
        v = np.array([r[f"g_{t:g}"] for r in ok])
        means.append(float(v.mean()))
        ses.append(float(v.std(ddof=1) / math.sqrt(v.size)))
    agg = {"theta": thetas, "g_mean": means, "g_se": ses}
    far = [i for i, t in enumerate(thetas) if abs(t - theta0) >= min_separation]
    verdicts = {
        "positive_by_5se": all(means[i] > n_se * ses[i] for i in far),
        "increasing_in_separation": _monotone_in_separation(theta0, thetas, means),
    }
    cfg = _config(model, theta0, n_seeds, base_seed, dt, theta_grid=thetas, T_burn=T_burn,
                  T_avg=T_avg, min_separation=min_separation, n_se=n_se)
    return McReport("identifiability", cfg, records, agg, verdicts)


def lln_scaling_check(model: ParamModel, theta0: float, theta: float, T_list, M: int,
                      base_seed: int, *, dt: float = 1e-3, pilot_T_burn: float | None = None,
                      pilot_T_avg: float | None = None, band=(0.35, 0.65),
                      workers: int = 1) -> McReport:
    """Second moment ``V(T)`` of the centred gap time average at each horizon.

    The centring value ``g`` comes from a pilot run on its own stream. The
    horizons of one replicate are nested prefixes of a single path.
    """
    theta0 = model.check_theta(theta0)
    theta = model.check_theta(theta)
    if theta == theta0:
        raise ValueError("theta must differ from theta0")
    _check_M(M, 2)
    T_list = _check_increasing(T_list)
    T_burn = pilot_T_burn or 10.0 / model.gamma(model.theta_min)
    T_avg = pilot_T_avg or max(10.0 * T_burn, 100.0 * T_list[-1])
    pilot_rng = make_rng(mix64(base_seed ^ PILOT_SALT))
    g = identifiability_curve(model, theta0, [theta], T_burn, T_avg, dt, pilot_rng)[0][1]

    T_max = T_list[-1]
    checkpoints = [n_grid_steps(T, dt) for T in T_list]
    seeds = stream_ids(base_seed, M)
    tag = horizon_tag(T_max)

    def one(i):
        rng = make_rng(seeds[i], tag)
        path = sample_chain_path(model.generator(theta0), model.nu, T_max, rng)
        segs = observation_segments(path, model.h, dt, rng)
        sums = gap_sums(model, [theta0, theta], segs, dt, checkpoints)[1]
        return {"replicate": i, "seed": seeds[i], "error": "",
                **{f"avg_{T:g}": float(s / T) for T, s in zip(T_list, sums)}}

    records = _map_replicates(one, M, workers, "LLN replications")
    for r in records:
        r.setdefault("seed", seeds[r["replicate"]])
    ok = _ok(records)
    V = {}
    for T in T_list:
        a = np.array([r[f"avg_{T:g}"] for r in ok])
        V[f"{T:g}"] = float(np.mean((a - g) ** 2))
    ratios = {f"{b:g}/{a:g}": V[f"{b:g}"] / V[f"{a:g}"] for a, b in zip(T_list, T_list[1:])}
    agg = {"g_pilot": g, "V": V, "ratios": ratios}
    verdicts = {"V_nonnegative": all(v >= 0 for v in V.values())}
    for key, r in ratios.items():
        verdicts[f"ratio_{key}_in_band"] = band[0] <= r <= band[1]
    cfg = _config(model, theta0, M, base_seed, dt, theta=theta, T_list=T_list,
                  pilot_T_burn=T_burn, pilot_T_avg=T_avg, band=list(band))
    return McReport("lln", cfg, records, agg, verdicts)
