"""Deterministic RNG derivation.

Every random draw in the package flows from a single root seed. Consumers
derive their own generator with ``derive_rng(root, DOMAIN, index...)``,
where the spawn key is a documented ``(domain, *indices)`` tuple. Two runs
with the same root seed therefore replay identical randomness regardless
of call order.

Domain constants:

======================  ====
FACT_TABLE              1
SHARDS                  2
DATASET                 3
NODE_INIT               4    (+ node index)
NODE_PRETRAIN           5    (+ node index)
EDGE_INIT               6    (+ edge index, 1-based)
OUTPUT_INIT             7
TRAIN_SHUFFLE           8    (+ epoch)
HEAD_BASELINE           9
DIAGNOSTICS             10
======================  ====
"""

from __future__ import annotations

import numpy as np

FACT_TABLE = 1
SHARDS = 2
DATASET = 3
NODE_INIT = 4
NODE_PRETRAIN = 5
EDGE_INIT = 6
OUTPUT_INIT = 7
TRAIN_SHUFFLE = 8
HEAD_BASELINE = 9
DIAGNOSTICS = 10


def derive_rng(root_seed: int, *key: int) -> np.random.Generator:
    """Return a Generator for the consumer identified by ``key``."""
    seq = np.random.SeedSequence(root_seed, spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(seq)
