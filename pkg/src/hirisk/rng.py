"""Named, counter-based random number streams.

Every source of randomness in the package draws from an explicitly seeded
Philox stream keyed by (seed, stream name). There is no global RNG state:
two call sites asking for different stream names receive independent
generators, and the same (seed, name) pair always yields the same stream
regardless of call order or thread schedule.
"""

import zlib

import numpy as np


def named_rng(seed: int, stream: str) -> np.random.Generator:
    """Return a Philox generator keyed by an integer seed and a stream name."""
    ident = zlib.crc32(stream.encode("utf-8"))
    seq = np.random.SeedSequence([int(seed), ident])
    return np.random.Generator(np.random.Philox(seq))
