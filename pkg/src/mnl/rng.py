"""Counter-based random streams keyed by (seed, trajectory index).

Each trajectory owns a Philox stream whose 128-bit key packs the run seed,
a purpose tag and the trajectory index.  A trajectory's draws therefore do
not depend on how trajectories are scheduled or chunked.
"""

from __future__ import annotations

import numpy as np

NOISE = 0
INITIAL = 1

_MASK64 = (1 << 64) - 1


def stream_key(seed: int, index: int, purpose: int = NOISE) -> int:
    if index < 0 or index >= 1 << 56:
        raise ValueError(f"trajectory index out of range: {index}")
    if purpose not in (NOISE, INITIAL):
        raise ValueError(f"unknown stream purpose {purpose}")
    return (int(seed) & _MASK64) | (purpose << 64) | (int(index) << 72)


def trajectory_stream(seed: int, index: int, purpose: int = NOISE) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, index, purpose)))


def streams(seed: int, start: int, stop: int, purpose: int = NOISE) -> list[np.random.Generator]:
    return [trajectory_stream(seed, i, purpose) for i in range(start, stop)]


def normal_block(gens: list[np.random.Generator], size: int) -> np.ndarray:
    """Standard normals of shape ``(len(gens), size)``, row ``i`` from ``gens[i]``."""
    out = np.empty((len(gens), size))
    for row, g in zip(out, gens):
        g.standard_normal(size, out=row)
    return out
