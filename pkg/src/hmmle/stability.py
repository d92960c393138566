"""Empirical checks of filter stability: contraction, tangent decay, robustness in the
parameter, boundary moments and coupling tails."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .filter import FilterError, run_filter, sampled_trajectories, tangent_trajectory
from .model import Generator, ParamModel, as_simplex, coupling_rate
from .report import McReport
from .rng import horizon_tag, make_rng, stream_ids
from .simulate import ObsPath, n_grid_steps, sample_coupled_chains, simulate_observations

FIT_WINDOW = (1e-10, 1e-1)
INJECTIVITY_FLOOR = 1e-14

__all__ = [
    "DecayFit",
    "ContractionResult",
    "fit_decay",
    "contraction_check",
    "contraction_study",
    "tangent_decay_check",
    "filter_robustness_check",
    "boundary_moment_check",
    "coupling_tail_check",
    "censored_ks_exponential",
    "semiflow_check",
    "injectivity_check",
    "hilbert_distance",
    "settles_monotone",
    "run_stability_suite",
]


@dataclass(frozen=True)
class DecayFit:
    """Least-squares line through ``(times, log values)``."""

    times: list
    values: list
    fitted_rate: float
    r_squared: float


def fit_decay(times, values) -> DecayFit:
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if t.size != v.size or t.size < 2:
        raise ValueError("need at least two (time, value) pairs of equal length")
    if np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing")
    if np.any(~(v > 0)):
        raise ValueError("values must be positive")
    y = np.log(v)
    slope, icept = np.polyfit(t, y, 1)
    resid = y - (slope * t + icept)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
    return DecayFit(t.tolist(), v.tolist(), float(slope), float(r2))


@dataclass(frozen=True)
class ContractionResult:
    times: np.ndarray
    distances: np.ndarray
    bound: np.ndarray
    hilbert: np.ndarray
    pathwise: bool
    fit: DecayFit | None  # None when the window holds fewer than two points


def _interior(mu, d):
    mu = as_simplex(mu, d)
    if np.any(mu <= 0):
        raise FilterError(f"initial law must be interior, got {mu.tolist()}")
    return mu


def contraction_check(model: ParamModel, theta: float, obs: ObsPath, mu1, mu2,
                      slack: float = 0.05, window=FIT_WINDOW) -> ContractionResult:
    """l1 distance between filters started at ``mu1`` and ``mu2`` on the same record.

    The pathwise flag asserts ``distance_k <= 2 exp(-gamma t_k) (1 + slack)`` at
    every grid point. The decay rate is fitted where the distance lies in ``window``.
    """
    mu1, mu2 = _interior(mu1, model.dim), _interior(mu2, model.dim)
    a = run_filter(model, theta, obs, mu1).pis
    b = run_filter(model, theta, obs, mu2).pis
    dist = np.abs(a - b).sum(axis=1)
    times = np.arange(dist.size) * obs.dt
    bound = 2.0 * np.exp(-model.gamma(theta) * times) * (1.0 + slack)
    sel = (dist >= window[0]) & (dist <= window[1])
    fit = fit_decay(times[sel], dist[sel]) if sel.sum() >= 2 else None
    return ContractionResult(times, dist, bound, hilbert_distance(a, b),
                             bool(np.all(dist <= bound)), fit)


def hilbert_distance(a, b) -> np.ndarray:
    """Hilbert projective distance ``max_i log(a_i/b_i) - min_i log(a_i/b_i)`` row by row."""
    r = np.log(np.asarray(a)) - np.log(np.asarray(b))
    return r.max(axis=-1) - r.min(axis=-1)


def settles_monotone(times, distances, transient: float, rtol: float = 1e-12,
                     atol: float = 1e-14) -> bool:
    """Distance weakly decreasing from time ``transient`` on, up to rounding."""
    d = np.asarray(distances)[np.asarray(times) >= transient]
    return bool(np.all(np.diff(d) <= rtol * d[:-1] + atol))


def _map(fn, n, workers):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, range(n)))
    return [fn(i) for i in range(n)]


def contraction_study(model: ParamModel, theta: float, T: float, dt: float, n_paths: int,
                      base_seed: int, mu1=None, mu2=None, slack: float = 0.05,
                      rate_margin: float = 0.2, min_pathwise: float = 0.99,
                      workers: int = 1) -> McReport:
    """:func:`contraction_check` over ``n_paths`` independent observation records."""
    d = model.dim
    if mu1 is None:
        mu1 = np.full(d, 0.01 / max(d - 1, 1))
        mu1[0] = 0.99
    if mu2 is None:
        mu2 = np.full(d, 0.01 / max(d - 1, 1))
        mu2[-1] = 0.99
    gamma = model.gamma(theta)
    seeds = stream_ids(base_seed, n_paths)
    tag = horizon_tag(T)

    def one(i):
        _, obs = simulate_observations(model, theta, T, dt, make_rng(seeds[i], tag))
        res = contraction_check(model, theta, obs, mu1, mu2, slack)
        return {"replicate": i, "seed": seeds[i],
                "fitted_rate": res.fit.fitted_rate if res.fit else math.nan,
                "r_squared": res.fit.r_squared if res.fit else math.nan,
                "pathwise": res.pathwise,
                "max_excess": float(np.max(res.distances / res.bound)),
                "l1_monotone_after_transient": settles_monotone(res.times, res.distances,
                                                                5.0 / gamma),
                "hilbert_monotone": settles_monotone(res.times, res.hilbert, 0.0)}

    records = _map(one, n_paths, workers)
    rates = np.array([r["fitted_rate"] for r in records])
    agg = {"gamma": gamma,
           "pathwise_fraction": float(np.mean([r["pathwise"] for r in records])),
           "mean_fitted_rate": float(np.nanmean(rates)),
           "max_fitted_rate": float(np.nanmax(rates)),
           "l1_monotone_fraction": float(np.mean([r["l1_monotone_after_transient"]
                                                  for r in records])),
           "hilbert_monotone_fraction": float(np.mean([r["hilbert_monotone"] for r in records]))}
    verdicts = {"pathwise_bound": agg["pathwise_fraction"] >= min_pathwise,
                "fitted_rate": agg["mean_fitted_rate"] <= -gamma + rate_margin}
    cfg = {"model": model.describe(), "theta": theta, "T": T, "dt": dt, "M": n_paths,
           "base_seed": base_seed, "mu1": list(map(float, mu1)), "mu2": list(map(float, mu2)),
           "slack": slack}
    return McReport("contraction", cfg, records, agg, verdicts)


def tangent_decay_check(model: ParamModel, theta: float, obs: ObsPath, mu, v) -> DecayFit:
    """Decay of ``|| D pi_{0,t}(mu) . v ||_1`` along the whole grid."""
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v != 0):
        raise ValueError("tangent vector must be nonzero")
    _, qs = tangent_trajectory(model, theta, obs, _interior(mu, model.dim), v)
    norms = np.abs(qs).sum(axis=1)
    times = np.arange(norms.size) * obs.dt
    keep = norms > 0
    return fit_decay(times[keep], norms[keep])


def _time_stride(T, dt, n_times):
    n = n_grid_steps(T, dt)
    if n % n_times:
        raise ValueError(f"{n_times} sample times do not divide {n} steps")
    return n // n_times


def filter_robustness_check(model: ParamModel, theta0: float, theta_list, T: float, dt: float,
                            M: int, base_seed: int, m_list=(1, 2), n_times: int = 20,
                            ratio_spread: float = 3.0, workers: int = 1) -> McReport:
    """``sup_t E|| pi^theta0_t - pi^theta_t ||_1**m / |theta0 - theta|**m`` per ``theta``.

    Records hold the distance of every replicate, parameter and sample time.
    """
    theta0 = model.check_theta(theta0)
    thetas = [model.check_theta(t) for t in theta_list]
    if theta0 in thetas:
        raise ValueError("theta_list must not contain theta0")
    stride = _time_stride(T, dt, n_times)
    seeds = stream_ids(base_seed, M)
    tag = horizon_tag(T)

    def one(i):
        _, obs = simulate_observations(model, theta0, T, dt, make_rng(seeds[i], tag))
        tr = sampled_trajectories(model, [theta0, *thetas], obs, stride)
        dist = np.abs(tr[1:] - tr[0]).sum(axis=2)  # (n_theta, n_times + 1)
        return [{"replicate": i, "seed": seeds[i], "theta": t, "t": k * stride * dt,
                 "distance": float(dist[j, k])}
                for j, t in enumerate(thetas) for k in range(1, n_times + 1)]

    records = [r for rs in _map(one, M, workers) for r in rs]
    agg: dict = {"ratios": {}}
    verdicts = {}
    for m in m_list:
        ratios = {}
        for t in thetas:
            by_t = np.array([r["distance"] for r in records if r["theta"] == t]).reshape(M, n_times)
            ratios[f"{t:g}"] = float(np.max(np.mean(by_t**m, axis=0))) / abs(t - theta0) ** m
        agg["ratios"][str(m)] = ratios
        vals = np.array(list(ratios.values()))
        verdicts[f"m{m}_ratio_spread"] = bool(np.all(vals > 0) and np.all(np.isfinite(vals))
                                              and vals.max() <= ratio_spread * vals.min())
    cfg = {"model": model.describe(), "theta0": theta0, "theta_list": thetas, "T": T, "dt": dt,
           "M": M, "base_seed": base_seed, "m_list": list(m_list), "n_times": n_times}
    return McReport("robustness", cfg, records, agg, verdicts)


def boundary_moment_check(model: ParamModel, theta: float, T: float, dt: float, M: int,
                          m_list, base_seed: int, n_times: int = 50,
                          stabilization: float = 0.25, workers: int = 1) -> McReport:
    """Running maximum over sample times of ``E (1 / min_i pi_t,i)**m``."""
    theta = model.check_theta(theta)
    m_list = [int(m) for m in m_list]
    if not m_list or not set(m_list) <= {1, 2, 4}:
        raise ValueError(f"m_list must be a nonempty subset of {{1, 2, 4}}, got {m_list}")
    if n_times % 2:
        raise ValueError("n_times must be even so that T/2 is a sample time")
    stride = _time_stride(T, dt, n_times)
    seeds = stream_ids(base_seed, M)
    tag = horizon_tag(T)

    def one(i):
        _, obs = simulate_observations(model, theta, T, dt, make_rng(seeds[i], tag))
        tr = sampled_trajectories(model, [theta], obs, stride)[0]
        inv = 1.0 / tr.min(axis=1)
        return [{"replicate": i, "seed": seeds[i], "t": k * stride * dt,
                 "inv_min_pi": float(inv[k])} for k in range(n_times + 1)]

    records = [r for rs in _map(one, M, workers) for r in rs]
    inv = np.array([r["inv_min_pi"] for r in records]).reshape(M, n_times + 1)
    times = np.arange(n_times + 1) * stride * dt
    agg: dict = {"times": times.tolist(), "running_max": {}, "at_T": {}, "at_half_T": {}}
    verdicts = {}
    half = n_times // 2
    for m in m_list:
        run_max = np.maximum.accumulate(np.mean(inv**m, axis=0))
        agg["running_max"][str(m)] = run_max.tolist()
        agg["at_T"][str(m)] = float(run_max[-1])
        agg["at_half_T"][str(m)] = float(run_max[half])
        verdicts[f"m{m}_stabilized"] = bool(
            abs(run_max[-1] - run_max[half]) <= stabilization * run_max[half])
    ms = sorted(m_list)
    verdicts["monotone_in_m"] = all(agg["at_T"][str(b)] >= agg["at_T"][str(a)]
                                    for a, b in zip(ms, ms[1:]))
    cfg = {"model": model.describe(), "theta": theta, "T": T, "dt": dt, "M": M,
           "base_seed": base_seed, "m_list": m_list, "n_times": n_times}
    return McReport("boundary_moments", cfg, records, agg, verdicts)


def censored_ks_exponential(taus, rate: float, T: float) -> float:
    """KS distance to ``Exponential(rate)`` for samples right-censored at ``T``.

    Censored samples are ``inf``; the supremum runs over ``[0, T]``.
    """
    taus = np.asarray(taus, dtype=np.float64)
    n = taus.size
    x = np.sort(taus[np.isfinite(taus)])
    cdf = 1.0 - np.exp(-rate * x)
    above = np.arange(1, x.size + 1) / n - cdf
    below = cdf - np.arange(x.size) / n
    tail = abs(x.size / n - (1.0 - math.exp(-rate * T)))
    return float(max(above.max(initial=0.0), below.max(initial=0.0), tail))


def _slowest_pair(g: Generator) -> tuple[int, int]:
    r = g.rates
    pairs = [(r[i, j] + r[j, i], i, j) for i in range(g.dim) for j in range(i + 1, g.dim)]
    _, i, j = min(pairs)
    return i, j


def coupling_tail_check(g: Generator, T: float, N: int, base_seed: int, states=None,
                        ks_tol: float = 0.05) -> McReport:
    """Empirical law of the coupling time against ``Exponential(min_{i!=j} l_ij + l_ji)``.

    ``states`` are the two initial states; by default the pair with the smallest
    ``l_ij + l_ji``. For ``d > 2`` the comparison is exploratory.
    """
    if N < 1000:
        raise ValueError(f"N must be at least 1000, got {N}")
    if g.dim < 2:
        raise ValueError("coupling needs at least two states")
    i, j = states if states is not None else _slowest_pair(g)
    nu_a, nu_b = np.eye(g.dim)[i], np.eye(g.dim)[j]
    rate = coupling_rate(g)
    seeds = stream_ids(base_seed, N)
    tag = horizon_tag(T)
    taus = np.array([sample_coupled_chains(g, nu_a, nu_b, T, make_rng(s, tag)).tau for s in seeds])
    records = [{"replicate": k, "seed": s, "tau": float(t)} for k, (s, t) in
               enumerate(zip(seeds, taus))]
    finite = np.sort(taus[np.isfinite(taus)])
    surv = 1.0 - np.arange(1, finite.size + 1) / N
    ks = censored_ks_exponential(taus, rate, T)
    agg = {"rate": rate, "ks_distance": ks, "censored_fraction": float(np.mean(~np.isfinite(taus))),
           "mean_tau": float(finite.mean()) if finite.size else math.nan,
           "survival_t": finite.tolist(), "survival": surv.tolist(),
           "exploratory": g.dim > 2}
    verdicts = {"ks_within_tol": ks <= ks_tol,
                "survival_decreasing": bool(np.all(np.diff(surv) <= 0))}
    cfg = {"rates": g.rates.tolist(), "T": T, "N": N, "base_seed": base_seed,
           "states": [int(i), int(j)], "ks_tol": ks_tol}
    return McReport("coupling", cfg, records, agg, verdicts)


def semiflow_check(model: ParamModel, theta: float, obs: ObsPath, split: int, init=None) -> bool:
    """Filtering to the end equals filtering to ``split`` and restarting there, bit for bit."""
    full = run_filter(model, theta, obs, init)
    first = run_filter(model, theta, obs.window(0, split), init)
    second = run_filter(model, theta, obs.window(split, obs.n_steps), first.pis[-1])
    return bool(np.array_equal(full.pis[: split + 1], first.pis)
                and np.array_equal(full.pis[split:], second.pis))


def injectivity_check(model: ParamModel, theta: float, obs: ObsPath, mu1, mu2,
                      floor: float = INJECTIVITY_FLOOR) -> bool:
    """Distinct interior starts keep a nonzero distance until it first drops below ``floor``."""
    mu1, mu2 = _interior(mu1, model.dim), _interior(mu2, model.dim)
    if np.array_equal(mu1, mu2):
        raise ValueError("initial laws must differ")
    a = run_filter(model, theta, obs, mu1).pis
    b = run_filter(model, theta, obs, mu2).pis
    for dist in np.abs(a - b).sum(axis=1):
        if dist < floor:
            return bool(dist > 0)
    return True


def run_stability_suite(model: ParamModel, theta: float, base_seed: int, *, dt: float = 1e-3,
                        n_paths: int = 100, T_contraction: float = 15.0,
                        robustness_offsets=(0.1, 0.2, 0.4), T_robust: float = 20.0,
                        M_robust: int = 100, T_boundary: float = 50.0, M_boundary: int = 100,
                        m_list=(1, 2, 4), T_coupling: float = 10.0, N_coupling: int = 10_000,
                        workers: int = 1) -> McReport:
    """All stability checks under one seed; sub-report verdicts are prefixed by their kind."""
    salts = {"contraction": 1, "robustness": 2, "boundary_moments": 3, "coupling": 4}
    seed = {k: (base_seed + v) & ((1 << 64) - 1) for k, v in salts.items()}
    subs = [
        contraction_study(model, theta, T_contraction, dt, n_paths, seed["contraction"],
                          workers=workers),
        filter_robustness_check(model, theta, [theta + o for o in robustness_offsets],
                                T_robust, dt, M_robust, seed["robustness"], workers=workers),
        boundary_moment_check(model, theta, T_boundary, dt, M_boundary, m_list,
                              seed["boundary_moments"], workers=workers),
        coupling_tail_check(model.generator(theta), T_coupling, N_coupling, seed["coupling"]),
    ]
    records, aggregates, verdicts = [], {}, {}
    for sub in subs:
        records += [{"check": sub.kind, **r} for r in sub.records]
        aggregates[sub.kind] = sub.aggregates
        verdicts.update({f"{sub.kind}.{k}": v for k, v in sub.verdicts.items()})
    cfg = {"model": model.describe(), "theta": theta, "base_seed": base_seed, "dt": dt,
           "sub_seeds": seed, **{sub.kind: sub.config for sub in subs}}
    return McReport("stability", cfg, records, aggregates, verdicts)
