"""Counter-based random streams.

Every draw site gets its own Philox generator keyed by a stable hash of
(seed, site, step), so randomness is reproducible regardless of execution
order: re-running a site with the same key replays the same stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def fold(*parts) -> int:
    """Mix arbitrary hashable parts into a stable 128-bit key."""
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def generator(seed: int, site: str | int = 0, step: int = 0) -> np.random.Generator:
    """Philox generator keyed by (seed, site, step)."""
    return np.random.Generator(np.random.Philox(key=fold(seed, site, step)))


def generator_from_key(key) -> np.random.Generator:
    """Philox generator from a prefolded integer key or a (seed, site, step) tuple."""
    if isinstance(key, tuple):
        key = fold(*key)
    return np.random.Generator(np.random.Philox(key=int(key) & ((1 << 128) - 1)))
