"""Labelled, counter-based random streams.

Every stochastic call site asks for ``stream(seed, "label", ...)``. The
Philox key is a hash of the seed and the labels, so adding or reordering
call sites elsewhere never perturbs an existing stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

U64 = (1 << 64) - 1


def stream(seed: int, *labels: object) -> np.random.Generator:
    if not 0 <= int(seed) <= U64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    text = "/".join([str(int(seed))] + [str(x) for x in labels])
    digest = hashlib.blake2b(text.encode(), digest_size=16).digest()
    key = np.frombuffer(digest, dtype="<u8").copy()
    return np.random.Generator(np.random.Philox(key=key))
