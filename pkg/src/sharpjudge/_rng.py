"""Counter-style random streams keyed by (seed, purpose, index...).

Every consumer derives its generator from the root seed plus a fixed key,
so a stream never depends on how many other streams exist or on the order
in which workers request them.
"""

import numpy as np

WEIGHTS = 1
REDRAW = 2
DATA = 3
TEST = 4
WIDTH = 5
CELL = 6


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(seed: int, *key: int) -> int:
    """Derive a 63-bit integer seed for a nested computation."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))


def fresh_seed() -> int:
    return int(np.random.SeedSequence().generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))
