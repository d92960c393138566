"""Independent reference implementations used by the tests.

None of these share code with the filter kernels.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm


def forward_filter(rates, h, increments, dt, init):
    """Discrete-time HMM forward recursion on the observation grid.

    Transition ``expm(rates * dt)`` followed by the Gaussian emission weight
    ``exp(h dx - h**2 dt / 2)``. Returns ``(pis, loglik)`` with ``pis`` of shape
    ``(n + 1, d)``.
    """
    P = expm(np.asarray(rates, dtype=float) * dt)
    h = np.asarray(h, dtype=float)
    v = np.asarray(init, dtype=float).copy()
    pis = [v.copy()]
    ll = 0.0
    for dx in increments:
        v = (v @ P) * np.exp(h * dx - 0.5 * h * h * dt)
        s = v.sum()
        ll += np.log(s)
        v /= s
        pis.append(v.copy())
    return np.array(pis), ll


def two_state_milstein(theta, increments, dt, p0):
    """Milstein scheme for the two-state filter and its parameter derivative.

    ``p = P(S = 1)`` and ``q = dp/dtheta`` for the switching-rate family with
    ``h = (0, 1)``:

        dp = theta (1 - 2p) dt + p (1 - p) (dX - p dt)
        dq = ((1 - 2p) - 2 theta q - p (1 - p) q) dt + q (1 - 2p) (dX - p dt)

    Both are driven by the observation ``X``; the Milstein term is
    ``(1/2) (L b) (dX**2 - dt)`` with ``L = b_p d/dp + b_q d/dq``.
    """
    n = len(increments)
    p = np.empty(n + 1)
    q = np.empty(n + 1)
    p[0], q[0] = p0, 0.0
    for k, dx in enumerate(increments):
        pk, qk = p[k], q[k]
        di = dx - pk * dt
        bp = pk * (1 - pk)
        bq = qk * (1 - 2 * pk)
        lbp = bp * (1 - 2 * pk)
        lbq = bp * (-2 * qk) + bq * (1 - 2 * pk)
        w = 0.5 * (dx * dx - dt)
        p[k + 1] = pk + theta * (1 - 2 * pk) * dt + bp * di + lbp * w
        q[k + 1] = qk + ((1 - 2 * pk) - 2 * theta * qk - bp * qk) * dt + bq * di + lbq * w
    return p, q


def brute_force_mle(loglik, lo, hi, n=2001):
    """Argmax of ``loglik`` over a dense uniform grid (smallest on ties)."""
    grid = np.linspace(lo, hi, n)
    vals = np.array([loglik(t) for t in grid])
    i = int(np.argmax(vals))
    return grid[i], vals[i], grid[1] - grid[0]
