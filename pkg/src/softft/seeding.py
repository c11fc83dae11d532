"""Counter-based seed derivation so every random stream is addressable by key."""

import hashlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(seed: int, *keys) -> int:
    """Deterministic 64-bit seed for the stream named by ``keys`` under ``seed``."""
    ss = np.random.SeedSequence([_key_int(seed), *(_key_int(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_key_int(seed), *(_key_int(k) for k in keys)]))
