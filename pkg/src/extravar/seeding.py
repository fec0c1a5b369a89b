"""Named random streams derived from one 64-bit seed.

``stream(seed, "layer", 0, "head", 2, "wq")`` always yields the same
generator, independent of how many other streams were drawn before it.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _spawn_key(names: tuple) -> tuple[int, ...]:
    digest = hashlib.sha256("/".join(str(n) for n in names).encode()).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def stream(seed: int, *names) -> np.random.Generator:
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=_spawn_key(names))
    return np.random.Generator(np.random.PCG64(ss))
