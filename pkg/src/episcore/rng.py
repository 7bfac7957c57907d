# Deterministic, platform-identical random streams.
#
# All randomness flows through Philox (counter-based) generators keyed by a
# master seed plus a purpose tag and optional integer subkeys, so any stage
# can be reproduced in isolation.
import hashlib

import numpy as np

_PURPOSES = {}


def _purpose_id(name):
    if name not in _PURPOSES:
        _PURPOSES[name] = int.from_bytes(
            hashlib.sha256(name.encode()).digest()[:4], "little")
    return _PURPOSES[name]


def stream(master_seed, purpose, *subkeys):
    """A Generator whose sequence depends only on (master_seed, purpose, subkeys)."""
    ss = np.random.SeedSequence(
        entropy=int(master_seed) & 0xFFFFFFFFFFFFFFFF,
        spawn_key=(_purpose_id(purpose),) + tuple(int(k) for k in subkeys))
    return np.random.Generator(np.random.Philox(ss))
