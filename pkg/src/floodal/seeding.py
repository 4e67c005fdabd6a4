"""Splittable seed derivation.

``derive_seed(base, *keys)`` hashes the base seed together with any mix of
ints and strings (run index, iteration, tile id, stream name) with BLAKE2b
and returns a 63-bit integer.  The same key path always gives the same
seed, so a single iteration or a single tile's MC passes can be replayed
without re-running everything before it.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np


def derive_seed(base: int, *keys: int | str) -> int:
    payload = json.dumps([int(base), *keys], separators=(",", ":")).encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def rng_for(base: int, *keys: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *keys))
