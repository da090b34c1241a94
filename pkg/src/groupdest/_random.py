"""Seed-derived random substreams.

Every random draw in the package comes from a generator keyed by the master
seed plus a tuple of integer stream ids, so results never depend on the order
in which work is scheduled.
"""
import numpy as np

# top-level stream tags
SAMPLING = 1
BOOTSTRAP = 2
CROSS_VALIDATION = 3
SYNTH = 4
CLASSIFIER = 5


def substream(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
