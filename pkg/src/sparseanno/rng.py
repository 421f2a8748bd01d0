"""Counter-based random draws keyed by integer tuples.

Each draw is a pure function of ``(seed, *counter)``, so results do not
depend on iteration order or on how work is split across workers.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _bitgen(seed: int, counter: tuple[int, ...]) -> np.random.Philox:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    if len(counter) > 3 or any(c < 0 for c in counter):
        raise ValueError(f"counter must be at most 3 non-negative ints, got {counter}")
    # word 0 is the one Philox increments; keep it free so streams never overlap
    ctr = [0] + list(counter) + [0] * (3 - len(counter))
    return np.random.Philox(key=[seed & _MASK64, seed >> 64], counter=ctr)


def uniform(seed: int, *counter: int) -> float:
    """A single U[0, 1) draw for ``(seed, counter)``."""
    return float(np.random.Generator(_bitgen(seed, counter)).random())


def generator(seed: int, *counter: int) -> np.random.Generator:
    """An independent stream for ``(seed, counter)``."""
    return np.random.Generator(_bitgen(seed, counter))
