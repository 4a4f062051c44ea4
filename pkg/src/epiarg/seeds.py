"""Named, order-stable RNG substreams derived from one run seed."""

from __future__ import annotations

import hashlib

import numpy as np


def _encode(part: int | str) -> int:
    if isinstance(part, int):
        return part & 0xFFFFFFFF
    digest = hashlib.blake2b(part.encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Derive an independent generator for (seed, path).

    The same (seed, path) always yields the same stream, regardless of how
    many other substreams were drawn first, so per-episode streams stay
    stable under any worker count.
    """
    ss = np.random.SeedSequence(entropy=seed & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(_encode(p) for p in path))
    return np.random.default_rng(ss)
