"""Hidden Markov model families observed in white noise.

A model is a scalar-parametrized family of rate matrices ``theta -> Lambda(theta)``
together with its entrywise derivative, a vector of observation levels ``h``,
a closed parameter interval and an initial law ``nu``. The observation is

    X_t = int_0^t h(S_r) dr + B_t

with ``B`` a standard Brownian motion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import expm

ROW_SUM_TOL = 1e-12
SIMPLEX_TOL = 1e-10
EPS_FLOOR = 1e-12

__all__ = [
    "EPS_FLOOR",
    "Generator",
    "ParamModel",
    "ModelError",
    "NotErgodicError",
    "validate_generator",
    "gamma_rate",
    "coupling_rate",
    "chain_stationary_dist",
    "as_simplex",
    "clamp_renorm",
    "two_state_model",
    "affine_model",
]


class ModelError(ValueError):
    """Raised for malformed model data."""


class NotErgodicError(ModelError):
    """Raised when a generator has no unique stationary law."""


@dataclass(frozen=True)
class Generator:
    """Transition-rate matrix of a finite continuous-time Markov chain."""

    rates: NDArray[np.float64]

    def __post_init__(self):
        rates = np.array(self.rates, dtype=np.float64)
        if rates.ndim != 2 or rates.shape[0] != rates.shape[1]:
            raise ModelError(f"rate matrix must be square, got shape {rates.shape}")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    @property
    def dim(self) -> int:
        return self.rates.shape[0]

    def semigroup(self, t: float) -> NDArray[np.float64]:
        """Transition matrix ``exp(Lambda t)``."""
        return expm(self.rates * t)


def validate_generator(g: Generator) -> list[str]:
    """Return the list of violated generator invariants (empty when valid)."""
    violations = []
    r = g.rates
    d = g.dim
    for i in range(d):
        for j in range(d):
            if i != j and r[i, j] < 0:
                violations.append(f"entry ({i},{j}) = {r[i, j]!r} is negative")
        s = float(r[i].sum())
        if abs(s) > ROW_SUM_TOL:
            violations.append(f"row {i} sum = {s:g}")
    return violations


def gamma_rate(g: Generator) -> float:
    """Filter contraction rate ``2 min_{p != q} sqrt(l_pq l_qp)``.

    For a one-state chain the filter is trivial and ``inf`` is returned.
    """
    d = g.dim
    if d == 1:
        return math.inf
    r = g.rates
    best = math.inf
    for p in range(d):
        for q in range(p + 1, d):
            best = min(best, math.sqrt(max(r[p, q], 0.0) * max(r[q, p], 0.0)))
    return 2.0 * best


def coupling_rate(g: Generator) -> float:
    """``min_{i != j} (l_ij + l_ji)``, the exponential rate of the coupling-time tail."""
    d = g.dim
    if d == 1:
        return math.inf
    r = g.rates
    return min(r[i, j] + r[j, i] for i in range(d) for j in range(d) if i != j)


def chain_stationary_dist(g: Generator) -> NDArray[np.float64]:
    """Solve ``mu^T Lambda = 0, sum(mu) = 1``."""
    d = g.dim
    if d == 1:
        return np.ones(1)
    a = np.vstack([g.rates.T, np.ones((1, d))])
    b = np.zeros(d + 1)
    b[-1] = 1.0
    if np.linalg.matrix_rank(a) < d:
        raise NotErgodicError("generator is not uniquely ergodic (singular balance system)")
    mu, *_ = np.linalg.lstsq(a, b, rcond=None)
    if np.max(np.abs(mu @ g.rates)) > 1e-10 or np.any(mu < -1e-12):
        raise NotErgodicError("generator is not uniquely ergodic")
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


def as_simplex(x: ArrayLike, dim: int | None = None) -> NDArray[np.float64]:
    """Validate a probability vector and return it as a read-only array."""
    v = np.array(x, dtype=np.float64).ravel()
    if dim is not None and v.size != dim:
        raise ModelError(f"expected a probability vector of length {dim}, got {v.size}")
    if np.any(v < 0) or abs(v.sum() - 1.0) > SIMPLEX_TOL:
        raise ModelError(f"not a probability vector: {v.tolist()}")
    v.setflags(write=False)
    return v


def clamp_renorm(x: ArrayLike, floor: float = EPS_FLOOR) -> NDArray[np.float64]:
    v = np.maximum(np.asarray(x, dtype=np.float64), floor)
    return v / v.sum()


@dataclass(frozen=True)
class ParamModel:
    """Scalar-parametrized hidden Markov model.

    Parameters
    ----------
    rates, drates : callable
        ``theta -> Lambda(theta)`` and its entrywise derivative ``Lambda'(theta)``.
    h : array_like
        Observation levels ``h(a_i)``.
    theta_min, theta_max : float
        Endpoints of the parameter interval; estimation runs over its closure.
    nu : array_like
        Initial law of the chain.
    family : str
        Name of the family, kept for serialization.
    spec : dict
        Family arguments (for ``affine``: ``A`` and ``B``).
    """

    rates: Callable[[float], NDArray[np.float64]]
    drates: Callable[[float], NDArray[np.float64]]
    h: NDArray[np.float64]
    theta_min: float
    theta_max: float
    nu: NDArray[np.float64]
    family: str = "custom"
    spec: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64).ravel()
        h.setflags(write=False)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "nu", as_simplex(self.nu, h.size))
        if not self.theta_min < self.theta_max:
            raise ModelError(
                f"empty parameter interval ({self.theta_min}, {self.theta_max})")

    @property
    def dim(self) -> int:
        return self.h.size

    @property
    def interval(self) -> tuple[float, float]:
        return (self.theta_min, self.theta_max)

    def check_theta(self, theta: float) -> float:
        if not self.theta_min <= theta <= self.theta_max:
            raise ModelError(
                f"theta={theta!r} outside [{self.theta_min}, {self.theta_max}]")
        return float(theta)

    def generator(self, theta: float) -> Generator:
        return Generator(self.rates(theta))

    def lam(self, theta: float) -> NDArray[np.float64]:
        return np.asarray(self.rates(theta), dtype=np.float64)

    def dlam(self, theta: float) -> NDArray[np.float64]:
        return np.asarray(self.drates(theta), dtype=np.float64)

    def gamma(self, theta: float) -> float:
        return gamma_rate(self.generator(theta))

    def describe(self) -> dict:
        """Plain-data summary for config snapshots."""
        return {
            "family": self.family,
            "dim": self.dim,
            "h": self.h.tolist(),
            "theta_min": self.theta_min,
            "theta_max": self.theta_max,
            "nu": self.nu.tolist(),
            **self.spec,
        }

    def validate(self, n_grid: int = 33, eps: float = 1e-6) -> list[str]:
        """Check generator validity, strong ergodicity and the derivative on a grid.

        Returns human-readable violations; an empty list means the model is usable.
        """
        problems = []
        d = self.dim
        for theta in np.linspace(self.theta_min, self.theta_max, n_grid):
            lam = self.lam(theta)
            if lam.shape != (d, d):
                problems.append(f"theta={theta:g}: rate matrix shape {lam.shape} != {(d, d)}")
                continue
            problems += [f"theta={theta:g}: {v}" for v in validate_generator(Generator(lam))]
            off = lam[~np.eye(d, dtype=bool)]
            if d > 1 and off.min() <= 0:
                problems.append(f"theta={theta:g}: min off-diagonal rate {off.min():g} <= 0")
            dl = self.dlam(theta)
            if np.max(np.abs(dl.sum(axis=1))) > 1e-10:
                problems.append(f"theta={theta:g}: derivative rows do not sum to 0")
            # forward differences near the right endpoint step backwards
            step = eps if theta + eps <= self.theta_max else -eps
            fd = (self.lam(theta + step) - lam) / step
            scale = 1.0 + np.max(np.abs(dl))
            if np.max(np.abs(fd - dl)) > 1e3 * abs(step) * scale:
                problems.append(f"theta={theta:g}: derivative disagrees with finite difference")
        return problems


def affine_model(base, slope, h, theta_interval, nu) -> ParamModel:
    """Family ``Lambda(theta) = A + theta B`` with ``Lambda'(theta) = B``."""
    a = np.array(base, dtype=np.float64)
    b = np.array(slope, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ModelError(f"base and slope must be equal square matrices, got {a.shape}, {b.shape}")
    a.setflags(write=False)
    b.setflags(write=False)
    lo, hi = theta_interval
    return ParamModel(
        rates=lambda theta: a + theta * b,
        drates=lambda theta: b,
        h=h,
        theta_min=float(lo),
        theta_max=float(hi),
        nu=nu,
        family="affine",
        spec={"A": a.tolist(), "B": b.tolist()},
    )


_SWITCH = np.array([[-1.0, 1.0], [1.0, -1.0]])
_SWITCH.setflags(write=False)


def two_state_model(theta_interval=(0.1, 5.0), nu=(0.5, 0.5)) -> ParamModel:
    """Symmetric two-state chain on {0, 1} with switching rate theta, ``h = (0, 1)``."""
    lo, hi = theta_interval
    if lo <= 0:
        raise ModelError(f"theta_min must be positive, got {lo!r}")
    return ParamModel(
        rates=lambda theta: theta * _SWITCH,
        drates=lambda theta: _SWITCH,
        h=(0.0, 1.0),
        theta_min=float(lo),
        theta_max=float(hi),
        nu=nu,
        family="two_state",
    )
