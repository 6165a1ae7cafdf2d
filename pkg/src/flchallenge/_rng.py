"""Named random substreams derived from a single root seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, name, *keys)``.

    The same arguments always yield the same stream, and streams with
    different names or keys do not overlap in practice.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]
    entropy.extend(int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, name: str, *keys: int) -> int:
    return int(stream(seed, name, *keys).integers(0, 2**63 - 1))
