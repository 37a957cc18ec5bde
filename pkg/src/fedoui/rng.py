"""Counter-based random streams.

Every random draw in an experiment comes from a :class:`numpy.random.Philox`
generator whose 128-bit key is built from the master seed and a purpose tag:

* key word 0: the master seed (unsigned 64-bit)
* key word 1: ``purpose << 48 | a << 24 | b`` where ``a`` and ``b`` are
  purpose-specific counters (e.g. round index and client id)

Streams are therefore addressable directly, without consuming a parent
generator, which makes results independent of scheduling and thread count.
"""

import numpy as np

PURPOSES = {
    "init": 1,
    "data": 2,
    "partition": 3,
    "noise": 4,
    "sample": 5,
    "train": 6,
}

_MASK24 = (1 << 24) - 1


def stream_key(seed, purpose, a=0, b=0):
    """Return the two-word Philox key for a stream."""
    if purpose not in PURPOSES:
        raise KeyError(f"unknown RNG purpose {purpose!r}")
    if not 0 <= a <= _MASK24 or not 0 <= b <= _MASK24:
        raise ValueError("stream counters must fit in 24 bits")
    seed = int(seed) & ((1 << 64) - 1)
    word = (PURPOSES[purpose] << 48) | (int(a) << 24) | int(b)
    return np.array([seed, word], dtype=np.uint64)


def stream(seed, purpose, a=0, b=0) -> np.random.Generator:
    """Independent generator for ``(seed, purpose, a, b)``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, purpose, a, b)))
