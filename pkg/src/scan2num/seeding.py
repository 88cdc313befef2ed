"""Sub-seed derivation: every random stream is keyed by (seed, purpose, index...)."""
import zlib

import numpy as np


def derive_rng(seed, purpose, *index):
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(purpose.encode("utf-8"))]
    key.extend(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(key))
