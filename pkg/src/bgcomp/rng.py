"""Keyed counter-based random number streams.

Every stochastic component in the package derives its randomness from a
Philox stream keyed by (seed, *path), where the path identifies the unit of
work (subject index, replicate index, ...).  Streams are therefore
independent of generation order and of how work is split across processes.
"""

import numpy as np

# stable small integers for stream purposes, so paths never collide
SUBJECT = 1
NOISE_PANEL = 2
REPLICATE = 3
CHAIN = 4


def keyed_rng(seed, *path):
    """Return a Generator that depends only on (seed, path)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
