"""Counter-based random streams.

Every random quantity is drawn from ``numpy.random.Philox`` (Philox-4x64-10)
keyed by a 128-bit key ``(stream_id, tag)``. Stream ids are derived from a
master seed and a replicate index with the SplitMix64 finalizer::

    stream_id = mix64(master_seed + 0x9E3779B97F4A7C15 * (index + 1))  (mod 2**64)

``mix64`` is a bijection on 64-bit integers and the odd multiplier makes the
argument injective in ``index``, so the ids of one master seed never collide.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN64 = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_id(master_seed: int, index: int) -> int:
    if not 0 <= master_seed <= MASK64:
        raise ValueError(f"master seed must be an unsigned 64-bit integer, got {master_seed}")
    if index < 0:
        raise ValueError(f"replicate index must be nonnegative, got {index}")
    return mix64(master_seed + GOLDEN64 * (index + 1))


def make_rng(stream: int, tag: int = 0) -> np.random.Generator:
    """Philox generator keyed by ``(stream, tag)``."""
    return np.random.Generator(np.random.Philox(key=(stream & MASK64) | ((tag & MASK64) << 64)))


def horizon_tag(T: float) -> int:
    """Tag separating the streams used at different horizons (microsecond resolution)."""
    return int(round(T * 1e6))


def replicate_rng(master_seed: int, index: int, T: float = 0.0) -> np.random.Generator:
    return make_rng(stream_id(master_seed, index), horizon_tag(T))


def stream_ids(master_seed: int, n: int) -> list[int]:
    ids = [stream_id(master_seed, i) for i in range(n)]
    assert len(set(ids)) == n, "replicate stream collision"
    return ids
