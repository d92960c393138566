"""Discretized Wonham filter, likelihoods, parameter sensitivities and tangent flows.

One filter step from ``pi`` with observation increment ``dx`` is

    hb    = h . pi
    e_i   = h_i - hb,  var = sum_i pi_i e_i**2
    pi_i <- pi_i + (Lambda^T pi)_i dt + pi_i e_i (dx - hb dt)
                 + 1/2 pi_i (e_i**2 - var) (dx**2 - dt)

followed by clamping at ``EPS_FLOOR`` and renormalization. The first three terms
are the Euler-Maruyama step of the Wonham equation; the last is the Milstein
correction for its state-dependent noise coefficient, without which the strong
error is only O(sqrt(dt)). Every term except the drift sums to zero over ``i``,
so the step preserves total mass exactly.

Log-likelihoods are left-point Ito sums ``sum_k hb_k dx_k - hb_k**2 dt / 2``.
Sensitivities and tangent vectors are exact derivatives of the discrete
recursion (including the renormalization), not discretizations of the
continuous derivative equations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numba import njit
from numpy.typing import NDArray

from .model import EPS_FLOOR, ParamModel, as_simplex, clamp_renorm
from .simulate import ObsPath

__all__ = [
    "FilterRun",
    "FilterError",
    "run_filter",
    "run_sensitivity_filter",
    "log_likelihood_ratio",
    "loglik_batch",
    "gap_sums",
    "sampled_trajectories",
    "propagate_tangent",
    "tangent_trajectory",
    "write_filter_csv",
]


class FilterError(ValueError):
    """Raised for invalid filter inputs."""


@dataclass(frozen=True)
class FilterRun:
    dt: float
    pis: NDArray[np.float64]            # (n_steps + 1, d)
    loglik_partial: NDArray[np.float64]  # (n_steps + 1,), partial sums, starts at 0
    innovations: NDArray[np.float64]    # (n_steps,)
    n_clamped: int
    sensitivity: NDArray[np.float64] | None = None  # (n_steps + 1, d)

    @property
    def loglik(self) -> float:
        return float(self.loglik_partial[-1])

    @property
    def n_steps(self) -> int:
        return self.innovations.size


# ---------------------------------------------------------------- kernels


@njit(cache=True, nogil=True, inline="always")
def _advance(Ls, li, h, src, si, dst, di, dx, dt, floor):
    """Filter step from row ``src[si]`` into ``dst[di]`` with rates ``Ls[li]``.

    Returns ``(hb, clamped)``.
    """
    d = h.size
    hb = 0.0
    for i in range(d):
        hb += h[i] * src[si, i]
    var = 0.0
    for i in range(d):
        e = h[i] - hb
        var += src[si, i] * e * e
    inn = dx - hb * dt
    w = dx * dx - dt
    clamped = False
    s = 0.0
    for j in range(d):
        a = 0.0
        for i in range(d):
            a += Ls[li, i, j] * src[si, i]
        e = h[j] - hb
        v = src[si, j] + a * dt + src[si, j] * (e * inn + 0.5 * (e * e - var) * w)
        if v < floor:
            v = floor
            clamped = True
        dst[di, j] = v
        s += v
    for j in range(d):
        dst[di, j] /= s
    return hb, clamped


@njit(cache=True, nogil=True, inline="always")
def _advance_sens(L, dL, h, P, Q, k, dx, dt, floor):
    """Step rows ``P[k], Q[k]`` into ``P[k + 1], Q[k + 1]``; ``Q`` is the derivative of ``P``.

    ``dL`` is the derivative of the rate matrix along the same direction (zero
    for tangent vectors in the initial condition).
    """
    d = h.size
    hb = 0.0
    hq = 0.0
    for i in range(d):
        hb += h[i] * P[k, i]
        hq += h[i] * Q[k, i]
    var = 0.0
    varq = 0.0
    pe = 0.0
    for i in range(d):
        e = h[i] - hb
        var += P[k, i] * e * e
        varq += Q[k, i] * e * e
        pe += P[k, i] * e
    varq -= 2.0 * hq * pe
    inn = dx - hb * dt
    innq = -hq * dt
    w = dx * dx - dt
    for j in range(d):
        a = 0.0
        aq = 0.0
        for i in range(d):
            a += L[i, j] * P[k, i]
            aq += dL[i, j] * P[k, i] + L[i, j] * Q[k, i]
        e = h[j] - hb
        c = e * e - var
        cq = -2.0 * e * hq - varq
        p = P[k, j]
        q = Q[k, j]
        P[k + 1, j] = p + a * dt + p * (e * inn + 0.5 * c * w)
        Q[k + 1, j] = (q + aq * dt + (q * e - p * hq) * inn + p * e * innq
                       + 0.5 * (q * c + p * cq) * w)
    clamped = False
    s = 0.0
    sq = 0.0
    for j in range(d):
        if P[k + 1, j] < floor:
            P[k + 1, j] = floor
            Q[k + 1, j] = 0.0
            clamped = True
        s += P[k + 1, j]
        sq += Q[k + 1, j]
    for j in range(d):
        P[k + 1, j] /= s
        Q[k + 1, j] = (Q[k + 1, j] - P[k + 1, j] * sq) / s
    return hb, clamped


@njit(cache=True, nogil=True)
def _run(L, h, dX, dt, p0, floor):
    n = dX.size
    d = p0.size
    Ls = L.reshape((1, d, d))
    pis = np.empty((n + 1, d))
    llp = np.empty(n + 1)
    innov = np.empty(n)
    pis[0] = p0
    llp[0] = 0.0
    ll = 0.0
    nclamp = 0
    for k in range(n):
        hb, cl = _advance(Ls, 0, h, pis, k, pis, k + 1, dX[k], dt, floor)
        ll += hb * dX[k] - 0.5 * hb * hb * dt
        llp[k + 1] = ll
        innov[k] = dX[k] - hb * dt
        if cl:
            nclamp += 1
    return pis, llp, innov, nclamp


@njit(cache=True, nogil=True)
def _run_sens(L, dL, h, dX, dt, p0, q0, floor):
    n = dX.size
    d = p0.size
    pis = np.empty((n + 1, d))
    qs = np.empty((n + 1, d))
    llp = np.empty(n + 1)
    innov = np.empty(n)
    pis[0] = p0
    qs[0] = q0
    llp[0] = 0.0
    ll = 0.0
    nclamp = 0
    for k in range(n):
        hb, cl = _advance_sens(L, dL, h, pis, qs, k, dX[k], dt, floor)
        ll += hb * dX[k] - 0.5 * hb * hb * dt
        llp[k + 1] = ll
        innov[k] = dX[k] - hb * dt
        if cl:
            nclamp += 1
    return pis, qs, llp, innov, nclamp


@njit(cache=True, nogil=True)
def _loglik_batch(Ls, h, dX, dt, p0, floor):
    m = Ls.shape[0]
    d = p0.size
    cur = np.empty((m, d))
    nxt = np.empty((m, d))
    for j in range(m):
        cur[j] = p0
    ll = np.zeros(m)
    nclamp = np.zeros(m, dtype=np.int64)
    for k in range(dX.size):
        dx = dX[k]
        for j in range(m):
            hb, cl = _advance(Ls, j, h, cur, j, nxt, j, dx, dt, floor)
            ll[j] += hb * dx - 0.5 * hb * hb * dt
            if cl:
                nclamp[j] += 1
        cur, nxt = nxt, cur
    return ll, nclamp


@njit(cache=True, nogil=True)
def _gap_segment(Ls, h, dX, dt, cur, nxt, acc, floor):
    """Advance ``m`` filters over one segment, accumulating ``(hb_j - hb_0)**2 dt`` into ``acc``.

    Returns the array holding the final states (``cur`` or ``nxt``).
    """
    m = Ls.shape[0]
    hbs = np.empty(m)
    for k in range(dX.size):
        for j in range(m):
            hb, cl = _advance(Ls, j, h, cur, j, nxt, j, dX[k], dt, floor)
            hbs[j] = hb
        for j in range(m):
            g = hbs[j] - hbs[0]
            acc[j] += g * g * dt
        cur, nxt = nxt, cur
    return cur


@njit(cache=True, nogil=True)
def _sampled_batch(Ls, h, dX, dt, p0, floor, stride):
    m = Ls.shape[0]
    d = p0.size
    n_out = dX.size // stride + 1
    out = np.empty((m, n_out, d))
    cur = np.empty((m, d))
    nxt = np.empty((m, d))
    for j in range(m):
        cur[j] = p0
        out[j, 0] = p0
    for k in range(dX.size):
        for j in range(m):
            _advance(Ls, j, h, cur, j, nxt, j, dX[k], dt, floor)
        cur, nxt = nxt, cur
        if (k + 1) % stride == 0:
            for j in range(m):
                out[j, (k + 1) // stride] = cur[j]
    return out


# ---------------------------------------------------------------- public API


def _check_obs(obs: ObsPath) -> NDArray[np.float64]:
    dX = np.ascontiguousarray(obs.increments)
    bad = np.flatnonzero(~np.isfinite(dX))
    if bad.size:
        raise FilterError(f"non-finite observation increment at step {int(bad[0])}")
    return dX


def _init(model: ParamModel, init) -> NDArray[np.float64]:
    p0 = np.array(model.nu if init is None else as_simplex(init, model.dim), dtype=np.float64)
    # interior starting points are used bit-for-bit so that runs compose exactly
    return clamp_renorm(p0) if np.any(p0 < EPS_FLOOR) else p0


def run_filter(model: ParamModel, theta: float, obs: ObsPath, init=None) -> FilterRun:
    """Filter trajectory and log-likelihood of ``obs`` under ``theta`` (``init`` defaults to ``nu``)."""
    theta = model.check_theta(theta)
    dX = _check_obs(obs)
    pis, llp, innov, ncl = _run(model.lam(theta), model.h, dX, obs.dt, _init(model, init), EPS_FLOOR)
    return FilterRun(obs.dt, pis, llp, innov, int(ncl))


def run_sensitivity_filter(model: ParamModel, theta: float, obs: ObsPath, init=None) -> FilterRun:
    """``run_filter`` plus the derivative of every ``pi_k`` with respect to theta."""
    theta = model.check_theta(theta)
    dX = _check_obs(obs)
    p0 = _init(model, init)
    pis, qs, llp, innov, ncl = _run_sens(model.lam(theta), model.dlam(theta), model.h, dX,
                                         obs.dt, p0, np.zeros_like(p0), EPS_FLOOR)
    return FilterRun(obs.dt, pis, llp, innov, int(ncl), sensitivity=qs)


def gap_sums(model: ParamModel, thetas, segments, dt: float, checkpoints, init=None):
    """Integrals of ``(h.pi^theta_j - h.pi^theta_0)**2`` from 0 to each checkpoint step.

    ``thetas[0]`` is the reference parameter. ``segments`` yields consecutive
    chunks of observation increments; ``checkpoints`` are sorted step indices.
    Returns an array of shape ``(len(thetas), len(checkpoints))``.
    """
    thetas = [model.check_theta(t) for t in thetas]
    Ls = np.stack([model.lam(t) for t in thetas])
    p0 = _init(model, init)
    cur = np.tile(p0, (len(thetas), 1))
    nxt = np.empty_like(cur)
    acc = np.zeros(len(thetas))
    checkpoints = list(checkpoints)
    out = np.zeros((len(thetas), len(checkpoints)))
    k = 0
    c = 0
    for seg in segments:
        seg = np.ascontiguousarray(seg, dtype=np.float64)
        bad = np.flatnonzero(~np.isfinite(seg))
        if bad.size:
            raise FilterError(f"non-finite observation increment at step {k + int(bad[0])}")
        pos = 0
        while pos < seg.size:
            while c < len(checkpoints) and checkpoints[c] == k:
                out[:, c] = acc
                c += 1
            stop = seg.size if c == len(checkpoints) else min(seg.size, pos + checkpoints[c] - k)
            res = _gap_segment(Ls, model.h, seg[pos:stop], dt, cur, nxt, acc, EPS_FLOOR)
            if res is not cur:
                cur, nxt = nxt, cur
            k += stop - pos
            pos = stop
    while c < len(checkpoints) and checkpoints[c] == k:
        out[:, c] = acc
        c += 1
    if c != len(checkpoints):
        raise FilterError(f"checkpoint {checkpoints[c]} beyond the {k} observed steps")
    return out


def sampled_trajectories(model: ParamModel, thetas, obs: ObsPath, stride: int, init=None):
    """Filters for several parameters on one record, kept every ``stride`` steps.

    Returns an array of shape ``(len(thetas), n_steps // stride + 1, d)``.
    """
    thetas = [model.check_theta(t) for t in thetas]
    Ls = np.stack([model.lam(t) for t in thetas])
    return _sampled_batch(Ls, model.h, _check_obs(obs), obs.dt, _init(model, init), EPS_FLOOR, stride)


def loglik_batch(model: ParamModel, thetas, obs: ObsPath, init=None) -> NDArray[np.float64]:
    """Log-likelihoods of ``obs`` at several parameters, computed in one pass."""
    thetas = [model.check_theta(t) for t in np.atleast_1d(thetas)]
    dX = _check_obs(obs)
    Ls = np.stack([model.lam(t) for t in thetas])
    ll, _ = _loglik_batch(Ls, model.h, dX, obs.dt, _init(model, init), EPS_FLOOR)
    return ll


def log_likelihood_ratio(model: ParamModel, theta: float, eta: float, obs: ObsPath,
                         init=None) -> float:
    """``log dP_theta/dP_eta`` on the observation record."""
    theta = model.check_theta(theta)
    eta = model.check_theta(eta)
    if theta == eta:
        return 0.0
    a = run_filter(model, theta, obs, init)
    b = run_filter(model, eta, obs, init)
    ha = a.pis[:-1] @ model.h
    hb = b.pis[:-1] @ model.h
    return float(np.sum((ha - hb) * obs.increments - 0.5 * (ha * ha - hb * hb) * obs.dt))


def tangent_trajectory(model: ParamModel, theta: float, obs: ObsPath, init, v,
                       s_index: int = 0, t_index: int | None = None):
    """Filter and tangent trajectories on ``[s, t]`` started from ``init`` along ``v``.

    Returns ``(pis, tangents)``, both of shape ``(t_index - s_index + 1, d)``.
    """
    theta = model.check_theta(theta)
    dX = _check_obs(obs)
    t_index = obs.n_steps if t_index is None else t_index
    if not 0 <= s_index <= t_index <= obs.n_steps:
        raise FilterError(f"need 0 <= s_index <= t_index <= {obs.n_steps}, got {s_index}, {t_index}")
    v = np.array(v, dtype=np.float64)
    if v.size != model.dim or abs(v.sum()) > 1e-10:
        raise FilterError("tangent vector must have d entries summing to zero")
    p0 = as_simplex(init, model.dim)
    if np.any(p0 <= 0):
        raise FilterError("tangent flow needs an interior starting point")
    pis, qs, _, _, _ = _run_sens(model.lam(theta), np.zeros((model.dim, model.dim)), model.h,
                                 np.ascontiguousarray(dX[s_index:t_index]), obs.dt,
                                 np.array(p0), v, EPS_FLOOR)
    return pis, qs


def propagate_tangent(model: ParamModel, theta: float, obs: ObsPath, init, v,
                      s_index: int, t_index: int) -> NDArray[np.float64]:
    """Jacobian-vector product ``D pi_{s,t}(init) . v`` of the discrete filter flow."""
    _, qs = tangent_trajectory(model, theta, obs, init, v, s_index, t_index)
    return qs[-1].copy()


def write_filter_csv(run: FilterRun, file) -> None:
    """``k,t,pi_0..pi_{d-1},loglik_partial[,dpi_0..dpi_{d-1}]``."""
    d = run.pis.shape[1]
    header = ["k", "t"] + [f"pi_{i}" for i in range(d)] + ["loglik_partial"]
    if run.sensitivity is not None:
        header += [f"dpi_{i}" for i in range(d)]
    with open(file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(run.pis.shape[0]):
            row = [k, repr(k * run.dt)] + [repr(float(x)) for x in run.pis[k]]
            row.append(repr(float(run.loglik_partial[k])))
            if run.sensitivity is not None:
                row += [repr(float(x)) for x in run.sensitivity[k]]
            w.writerow(row)

