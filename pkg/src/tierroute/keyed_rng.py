"""Counter-based random streams keyed by (seed, query_id, tier, stream).

Every oracle draw for a query is a pure function of its key, so outcomes do
not depend on batch composition or evaluation order. Two policies that both
send query 17 to tier 2 see the same outcome (common random numbers).
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

# stream ids
QUALITY = 1
TOKENS = 2
LATENCY = 3
ROUTING = 4
SUBSAMPLE = 5


def _mix(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on a uint64 array (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def keys(seed: int, query_ids, tier: int, stream: int) -> np.ndarray:
    ids = np.asarray(query_ids, dtype=np.int64).astype(np.uint64)
    head = np.uint64((int(seed) * 0x2545F4914F6CDD1D + (tier << 8) + stream) & _MASK64)
    with np.errstate(over="ignore"):
        h = _mix(np.full(ids.shape, head, dtype=np.uint64) + _GOLDEN)
        return _mix(h ^ (ids * _GOLDEN + np.uint64(1)))


def uniforms(seed: int, query_ids, tier: int, stream: int, n: int) -> np.ndarray:
    """Array of shape (len(query_ids), n) with entries strictly inside (0, 1)."""
    k = keys(seed, query_ids, tier, stream)
    ctr = (np.arange(1, n + 1, dtype=np.uint64) * _GOLDEN)[None, :]
    with np.errstate(over="ignore"):
        z = _mix(k[:, None] + ctr)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) / 9007199254740992.0


def normals(seed: int, query_ids, tier: int, stream: int) -> np.ndarray:
    """One standard normal per key (Box-Muller on two keyed uniforms)."""
    u = uniforms(seed, query_ids, tier, stream, 2)
    return np.sqrt(-2.0 * np.log(u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
