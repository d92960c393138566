"""Maximum-likelihood estimation, Fisher information and local likelihood profiles."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .filter import loglik_batch, run_sensitivity_filter
from .model import ParamModel
from .rng import make_rng, mix64, stream_ids
from .simulate import ObsPath, simulate_observations

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0

DEFAULT_GRID_SIZE = 64
DEFAULT_REFINE_TOL = 1e-6
DEFAULT_U_GRID = tuple(np.linspace(-5.0, 5.0, 21))

__all__ = [
    "EstimationError",
    "MleResult",
    "FisherEstimate",
    "FisherPool",
    "Profile",
    "golden_section_max",
    "estimate_mle",
    "fisher_information",
    "pooled_fisher",
    "likelihood_profile",
    "fit_log_profile_curvature",
    "curvature_to_fisher",
    "pooled_curvature_fisher",
    "profile_replications",
    "write_mle_csv",
    "write_profile_csv",
]


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class MleResult:
    theta_hat: float
    loglik_at_hat: float  # log-likelihood ratio against ``eta``
    n_evals: int
    at_boundary: bool
    eta: float
    profile: list[tuple[float, float]] = field(default_factory=list)


@dataclass(frozen=True)
class FisherEstimate:
    value: float
    T: float
    dt: float


@dataclass(frozen=True)
class FisherPool:
    values: list[float]
    T: float
    dt: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def cv(self) -> float:
        return float(np.std(self.values, ddof=1) / np.mean(self.values))


@dataclass(frozen=True)
class Profile:
    """Points ``(u, log Z_T(u))`` and the ``u`` values dropped for leaving the interval."""

    theta0: float
    T: float
    points: list[tuple[float, float]]
    dropped: list[float]


def golden_section_max(f, a: float, b: float, tol: float):
    """Maximize a unimodal ``f`` on ``[a, b]`` until the bracket is at most ``tol`` wide.

    Returns every evaluation as a list of ``(x, f(x))`` pairs.
    """
    evals = []
    x1 = b - INV_PHI * (b - a)
    x2 = a + INV_PHI * (b - a)
    f1, f2 = f(x1), f(x2)
    evals += [(x1, f1), (x2, f2)]
    while b - a > tol:
        if f1 >= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - INV_PHI * (b - a)
            f1 = f(x1)
            evals.append((x1, f1))
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + INV_PHI * (b - a)
            f2 = f(x2)
            evals.append((x2, f2))
    return evals


def estimate_mle(model: ParamModel, obs: ObsPath, grid_size: int = DEFAULT_GRID_SIZE,
                 refine_tol: float = DEFAULT_REFINE_TOL, eta: float | None = None,
                 init=None) -> MleResult:
    """Global maximizer of the likelihood ratio over the closed parameter interval.

    A uniform grid locates the best cell; golden-section search refines inside the
    two neighbouring cells. Ties go to the smaller parameter.
    """
    if grid_size < 8:
        raise EstimationError(f"grid_size must be >= 8, got {grid_size}")
    if not refine_tol > 0:
        raise EstimationError(f"refine_tol must be positive, got {refine_tol}")
    lo, hi = model.interval
    if eta is None:
        eta = 0.5 * (lo + hi)
    grid = np.linspace(lo, hi, grid_size)
    ll = loglik_batch(model, np.append(grid, eta), obs, init)
    ll_eta = ll[-1]
    llr = ll[:-1] - ll_eta
    bad = np.flatnonzero(~np.isfinite(llr))
    if bad.size:
        raise EstimationError(f"non-finite likelihood at theta={grid[bad[0]]!r}")
    i = int(np.argmax(llr))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid_size - 1)]

    def f(theta):
        v = float(loglik_batch(model, [theta], obs, init)[0] - ll_eta)
        if not math.isfinite(v):
            raise EstimationError(f"non-finite likelihood at theta={theta!r}")
        return v

    evals = list(zip(grid.tolist(), llr.tolist())) + golden_section_max(f, a, b, refine_tol)
    evals.sort()
    best = max(evals, key=lambda e: e[1])  # first maximum = smallest theta
    theta_hat = best[0]
    return MleResult(
        theta_hat=theta_hat,
        loglik_at_hat=best[1],
        n_evals=len(evals) + 1,
        at_boundary=bool(theta_hat - lo <= refine_tol or hi - theta_hat <= refine_tol),
        eta=float(eta),
        profile=evals,
    )


def fisher_from_path(model: ParamModel, theta0: float, obs: ObsPath) -> float:
    """Time average of ``(h . d pi / d theta)**2`` along one observation record."""
    run = run_sensitivity_filter(model, theta0, obs)
    hq = run.sensitivity[:-1] @ model.h
    return float(np.sum(hq * hq) * obs.dt / obs.T)


def fisher_information(model: ParamModel, theta0: float, T: float, dt: float,
                       rng: np.random.Generator) -> FisherEstimate:
    _, obs = simulate_observations(model, theta0, T, dt, rng)
    return FisherEstimate(fisher_from_path(model, theta0, obs), T, dt)


FISHER_SALT = 0xF15E_4E11_0000_0001


def pooled_fisher(model: ParamModel, theta0: float, T: float, dt: float, n_runs: int,
                  base_seed: int) -> FisherPool:
    """Fisher estimates from ``n_runs`` independent paths on a stream family of their own."""
    master = mix64(base_seed ^ FISHER_SALT)
    values = [fisher_information(model, theta0, T, dt, make_rng(s)).value
              for s in stream_ids(master, n_runs)]
    return FisherPool(values, T, dt)


def likelihood_profile(model: ParamModel, theta0: float, obs: ObsPath,
                       u_grid=DEFAULT_U_GRID) -> Profile:
    """``log Z_T(u) = log L_T(theta0 + u / sqrt(T), theta0)`` on ``u_grid``."""
    theta0 = model.check_theta(theta0)
    scale = 1.0 / math.sqrt(obs.T)
    lo, hi = model.interval
    keep, dropped = [], []
    for u in u_grid:
        (keep if lo <= theta0 + u * scale <= hi else dropped).append(float(u))
    if not keep:
        raise EstimationError("no u in the grid maps inside the parameter interval")
    thetas = [theta0 + u * scale for u in keep]
    ll = loglik_batch(model, thetas + [theta0], obs)
    logz = ll[:-1] - ll[-1]
    points = [(u, float(z)) for u, z in zip(keep, logz)]
    return Profile(theta0, obs.T, points, dropped)


def fit_log_profile_curvature(profile) -> float:
    """Quadratic coefficient ``c2`` of the least-squares fit ``c2 u**2 + c1 u + c0``.

    For ``log Z(u) = sqrt(I) zeta u - I u**2 / 2`` this is ``-I / 2``; see
    :func:`curvature_to_fisher`.
    """
    points = profile.points if isinstance(profile, Profile) else profile
    u = np.array([p[0] for p in points], dtype=np.float64)
    z = np.array([p[1] for p in points], dtype=np.float64)
    if u.size < 5:
        raise EstimationError(f"need at least 5 profile points, got {u.size}")
    design = np.vander(u, 3)
    if np.linalg.matrix_rank(design) < 3:
        raise EstimationError("degenerate profile: fewer than 3 distinct u values")
    coef, *_ = np.linalg.lstsq(design, z, rcond=None)
    return float(coef[0])


def curvature_to_fisher(c2: float) -> float:
    return -2.0 * c2


CURVATURE_SALT = 0xC0A7_0000_0000_0003


def profile_replications(model: ParamModel, theta0: float, T: float, dt: float,
                         n_paths: int, base_seed: int, u_grid=DEFAULT_U_GRID, start: int = 0,
                         workers: int = 1) -> list[Profile]:
    """Likelihood profiles on replicates ``start .. start + n_paths - 1`` of their own stream family."""
    master = mix64(base_seed ^ CURVATURE_SALT)
    seeds = stream_ids(master, start + n_paths)[start:]

    def one(s):
        _, obs = simulate_observations(model, theta0, T, dt, make_rng(s))
        return likelihood_profile(model, theta0, obs, u_grid)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, seeds))
    return [one(s) for s in seeds]


def pooled_curvature_fisher(model: ParamModel, theta0: float, T: float, dt: float,
                            n_paths: int, base_seed: int, u_grid=DEFAULT_U_GRID,
                            workers: int = 1) -> FisherPool:
    """Curvature estimates ``-2 c2`` of log-profile fits on ``n_paths`` independent paths."""
    profiles = profile_replications(model, theta0, T, dt, n_paths, base_seed, u_grid,
                                    workers=workers)
    return FisherPool([curvature_to_fisher(fit_log_profile_curvature(p)) for p in profiles], T, dt)


def write_mle_csv(result: MleResult, file) -> None:
    with open(file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", "loglik"])
        for theta, ll in result.profile:
            w.writerow([repr(float(theta)), repr(float(ll))])


def write_profile_csv(profile: Profile, file) -> None:
    with open(file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["u", "logZ"])
        for u, z in profile.points:
            w.writerow([repr(float(u)), repr(float(z))])
