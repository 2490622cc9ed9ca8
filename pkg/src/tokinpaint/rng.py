"""Counter-based random stream splitting.

All randomness in a run descends from one integer seed. Named streams are
derived with ``SeedSequence`` spawn keys, so a stream's draws depend only on
``(seed, name)`` and never on the order in which other streams are used.
"""

import zlib

import numpy as np

# stable ids for named streams; zlib.crc32 is fixed across platforms and
# Python hash randomisation
def _key(name):
    if isinstance(name, int):
        return name
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed, *names):
    """Return an independent ``np.random.Generator`` for ``(seed, *names)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
