"""Deterministic random streams.

One master seed fans out into named substreams via ``SeedSequence`` spawn
keys, so adding a new consumer never perturbs existing streams and the
same (seed, tag) pair always yields the same draws regardless of call
order elsewhere in the program.
"""

import numpy as np

# stable tag -> spawn-key mapping; append only, never renumber
_TAGS = {
    "data": 0,
    "mask": 1,
    "noise": 2,
    "timestep": 3,
    "init": 4,
    "shuffle": 5,
    "split": 6,
    "eval": 7,
}


def make_rng(seed, tag=None):
    """Generator for `tag`'s substream of `seed` (Philox counter-based)."""
    if tag is None:
        ss = np.random.SeedSequence(seed)
    else:
        ss = np.random.SeedSequence(seed, spawn_key=(_TAGS[tag],))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, index):
    """A child integer seed, e.g. one per training run in a sweep."""
    ss = np.random.SeedSequence(seed, spawn_key=(1000 + index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**31))
