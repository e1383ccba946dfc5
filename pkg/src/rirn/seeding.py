"""Counter-based random streams derived from one master seed.

Each consumer (weight init, shuffling, augmentation, data generation)
draws from its own Philox stream keyed by ``(seed, stream name, counters)``,
so adding draws to one stream never shifts another. Two variants trained
with the same seed therefore get identical initial values for every
parameter they share.
"""

import zlib

import numpy as np


def generator(seed, stream, *counters):
    key = [int(seed) % (1 << 63), zlib.crc32(stream.encode("utf-8"))]
    key.extend(int(c) for c in counters)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
