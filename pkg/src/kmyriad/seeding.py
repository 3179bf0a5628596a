"""Seed splitting.

Every random stream is derived from one 64-bit run seed plus a spawn key
``(purpose, *indices)`` through :class:`numpy.random.SeedSequence`.  Because
keys name the consumer (replica, epoch, update ...) rather than a worker,
results do not depend on how work is partitioned.
"""

import numpy as np

INIT = 0
RESET = 1
ACTION = 2
MINIBATCH = 3
GOAL = 4
EVAL = 5


def stream(seed: int, *key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


def child_seed(seed: int, *key: int) -> int:
    """A derived 64-bit integer seed, for handing to nested components."""
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in key))
    return int(seq.generate_state(1, dtype=np.uint64)[0])
