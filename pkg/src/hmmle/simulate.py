"""Sampling of hidden chain trajectories, observation increments and coupled pairs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .model import Generator, ModelError, as_simplex

GRID_TOL = 1e-9


@dataclass(frozen=True)
class ChainPath:
    """Piecewise-constant chain trajectory on ``[0, T]``.

    ``states[0]`` is the initial state and ``states[k + 1]`` is entered at
    ``jump_times[k]``.
    """

    T: float
    jump_times: NDArray[np.float64]
    states: NDArray[np.int64]

    def __post_init__(self):
        jt = np.array(self.jump_times, dtype=np.float64)
        st = np.array(self.states, dtype=np.int64)
        if st.size != jt.size + 1:
            raise ValueError("states must have one more entry than jump_times")
        if jt.size and (np.any(np.diff(jt) <= 0) or jt[0] <= 0 or jt[-1] > self.T):
            raise ValueError("jump times must be strictly increasing within (0, T]")
        if np.any(st[1:] == st[:-1]):
            raise ValueError("consecutive states must differ")
        jt.setflags(write=False)
        st.setflags(write=False)
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "states", st)

    def state_at(self, t: ArrayLike) -> NDArray[np.int64]:
        """State occupied at times ``t`` (right-continuous)."""
        idx = np.searchsorted(self.jump_times, np.asarray(t), side="right")
        return self.states[idx]

    def occupation_integral(self, values: ArrayLike, grid: ArrayLike) -> NDArray[np.float64]:
        """``int_0^t values[S_r] dr`` evaluated exactly at each time of ``grid``."""
        v = np.asarray(values, dtype=np.float64)[self.states]
        knots = np.concatenate([[0.0], self.jump_times])
        cum = np.concatenate([[0.0], np.cumsum(np.diff(knots) * v[:-1])])
        grid = np.asarray(grid, dtype=np.float64)
        idx = np.searchsorted(knots, grid, side="right") - 1
        return cum[idx] + (grid - knots[idx]) * v[idx]


@dataclass(frozen=True)
class ObsPath:
    """Observation increments ``dX_k = X_{(k+1) dt} - X_{k dt}`` on a uniform grid."""

    dt: float
    increments: NDArray[np.float64]

    def __post_init__(self):
        inc = np.array(self.increments, dtype=np.float64).ravel()
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def n_steps(self) -> int:
        return self.increments.size

    @property
    def T(self) -> float:
        return self.n_steps * self.dt

    def coarsen(self, factor: int) -> ObsPath:
        """Aggregate consecutive increments onto a grid ``factor`` times coarser."""
        n = self.n_steps // factor
        inc = self.increments[: n * factor].reshape(n, factor).sum(axis=1)
        return ObsPath(self.dt * factor, inc)

    def window(self, start: int, stop: int) -> ObsPath:
        return ObsPath(self.dt, self.increments[start:stop])


@dataclass(frozen=True)
class CoupledPair:
    """Two chains on a common probability space that coincide after ``tau``."""

    path_a: ChainPath
    path_b: ChainPath
    tau: float  # math.inf when the chains have not met by T


def n_grid_steps(T: float, dt: float) -> int:
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > GRID_TOL:
        raise ValueError(f"dt={dt!r} does not divide T={T!r}")
    return n


def _holding_and_next(rates: NDArray, state: int, rng: np.random.Generator):
    out = -rates[state, state]
    if out <= 0:
        return math.inf, state
    hold = rng.exponential(1.0 / out)
    probs = np.clip(rates[state], 0.0, None)
    probs[state] = 0.0
    nxt = int(rng.choice(probs.size, p=probs / probs.sum()))
    return hold, nxt


def sample_chain_path(g: Generator, nu, T: float, rng: np.random.Generator) -> ChainPath:
    """Holding-time construction of a chain path on ``[0, T]``."""
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    nu = as_simplex(nu, g.dim)
    rates = np.array(g.rates)
    state = int(rng.choice(g.dim, p=nu))
    t = 0.0
    times, states = [], [state]
    while True:
        hold, nxt = _holding_and_next(rates, state, rng)
        t += hold
        if t > T:
            break
        times.append(t)
        states.append(nxt)
        state = nxt
    return ChainPath(T, np.array(times), np.array(states))


def observation_segments(path: ChainPath, h, dt: float, rng: np.random.Generator,
                         chunk_steps: int = 1 << 20):
    """Yield the observation increments of ``path`` in consecutive chunks.

    The drift of each cell is the exact integral of ``h(S_t)`` using the jump times.
    """
    n = n_grid_steps(path.T, dt)
    h = np.asarray(h, dtype=np.float64)
    sd = math.sqrt(dt)
    for start in range(0, n, chunk_steps):
        stop = min(n, start + chunk_steps)
        grid = np.arange(start, stop + 1) * dt
        if stop == n:
            grid[-1] = path.T
        drift = np.diff(path.occupation_integral(h, grid))
        yield drift + sd * rng.standard_normal(stop - start)


def sample_observations(path: ChainPath, h, dt: float, rng: np.random.Generator) -> ObsPath:
    """Increments of ``X_t = int h(S_r) dr + B_t`` on the grid of step ``dt``."""
    return ObsPath(dt, np.concatenate(list(observation_segments(path, h, dt, rng))))


def simulate_observations(model, theta: float, T: float, dt: float, rng: np.random.Generator):
    """Chain path under ``theta`` started from ``model.nu`` and its observations."""
    theta = model.check_theta(theta)
    path = sample_chain_path(model.generator(theta), model.nu, T, rng)
    return path, sample_observations(path, model.h, dt, rng)


def sample_coupled_chains(g: Generator, nu_a, nu_b, T: float,
                          rng: np.random.Generator) -> CoupledPair:
    """Independent chains until their first meeting, identical afterwards."""
    off = g.rates[~np.eye(g.dim, dtype=bool)]
    if g.dim > 1 and off.min() <= 0:
        raise ModelError("coupling requires all off-diagonal rates positive")
    rates = np.array(g.rates)
    sa = int(rng.choice(g.dim, p=as_simplex(nu_a, g.dim)))
    sb = int(rng.choice(g.dim, p=as_simplex(nu_b, g.dim)))
    ta, tb, states_a, states_b = [], [], [sa], [sb]
    t = 0.0
    tau = 0.0 if sa == sb else math.inf
    # competing exponential clocks while apart
    while tau == math.inf:
        qa, qb = -rates[sa, sa], -rates[sb, sb]
        t += rng.exponential(1.0 / (qa + qb))
        if t > T:
            break
        if rng.random() * (qa + qb) < qa:
            _, sa = _holding_and_next(rates, sa, rng)
            ta.append(t)
            states_a.append(sa)
        else:
            _, sb = _holding_and_next(rates, sb, rng)
            tb.append(t)
            states_b.append(sb)
        if sa == sb:
            tau = t
    if tau < math.inf:
        t = tau
        s = sa
        while True:
            hold, nxt = _holding_and_next(rates, s, rng)
            t += hold
            if t > T:
                break
            s = nxt
            for times, states in ((ta, states_a), (tb, states_b)):
                times.append(t)
                states.append(s)
    return CoupledPair(
        ChainPath(T, np.array(ta), np.array(states_a)),
        ChainPath(T, np.array(tb), np.array(states_b)),
        tau,
    )


def write_chain_csv(path: ChainPath, file) -> None:
    """``jump_time,state`` rows; the first row carries time 0 and the initial state."""
    with open(file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["jump_time", "state"])
        w.writerow([repr(0.0), int(path.states[0])])
        for t, s in zip(path.jump_times, path.states[1:]):
            w.writerow([repr(float(t)), int(s)])


def read_chain_csv(file, T: float) -> ChainPath:
    rows = _read_rows(file, ["jump_time", "state"])
    states = [int(r[1]) for r in rows]
    times = [float(r[0]) for r in rows[1:]]
    return ChainPath(T, np.array(times), np.array(states))


def write_obs_csv(obs: ObsPath, file) -> None:
    """``k,dx`` rows; floats are written with 17 significant digits."""
    with open(file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "dx"])
        for k, dx in enumerate(obs.increments):
            w.writerow([k, repr(float(dx))])


def read_obs_csv(file, dt: float) -> ObsPath:
    rows = _read_rows(file, ["k", "dx"])
    if [int(r[0]) for r in rows] != list(range(len(rows))):
        raise ValueError(f"{file}: step indices are not 0..n-1")
    return ObsPath(dt, np.array([float(r[1]) for r in rows]))


def _read_rows(file, header):
    with open(Path(file), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != header:
        raise ValueError(f"{file}: expected header {','.join(header)}")
    return rows[1:]
