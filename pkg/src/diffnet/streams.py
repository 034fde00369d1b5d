"""Counter-based random streams.

Every random quantity is drawn from its own generator keyed by
``(seed, run, node, stream)`` so results do not depend on how runs are
scheduled or batched.
"""

import numpy as np

REGRESSOR = 0
NOISE = 1
H_MASK = 2
Q_MASK = 3
NEIGHBOR_SELECT = 4
HARVEST = 5
MODEL = 100
TOPOLOGY = 101
SIGMA = 102
LIGHTING = 103


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))


def node_stream(seed: int, run: int, node: int, kind: int) -> np.random.Generator:
    return stream(seed, run, node, kind)
