"""Seed derivation.

Every random stage receives an integer seed derived from one master seed and
a tuple of tags, e.g. ``derive_seed(master, "teacher", round, scene, run)``.
Tags may be ints or strings; strings are hashed with CRC32 so the mapping is
stable across interpreter runs (``hash()`` is salted).
"""

import zlib

import numpy as np


def _tag_to_int(tag):
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def derive_seed(master, *tags):
    entropy = [int(master) & 0xFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def rng_for(master, *tags):
    return np.random.default_rng(derive_seed(master, *tags))
