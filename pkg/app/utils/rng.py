"""Counter-based random streams keyed by seed and purpose."""

import hashlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    """Stable integer for a stream key; names are hashed with BLAKE2b."""
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *keys: Key) -> np.random.Generator:
    """
    Return an independent generator for ``(seed, *keys)``.

    The same seed and keys always give the same numbers, whatever order
    or thread the stream is created on.

    Args:
        seed: Top-level run seed
        *keys: Purpose names and integer counters (step, block, line, ...)

    Returns:
        np.random.Generator: Philox-backed generator
    """
    sequence = np.random.SeedSequence(
        entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys)
    )
    return np.random.Generator(np.random.Philox(sequence))


def derive_seed(seed: int, *keys: Key) -> int:
    """A 63-bit integer seed derived from ``(seed, *keys)`` for sub-runs."""
    sequence = np.random.SeedSequence(
        entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys)
    )
    return int(sequence.generate_state(1, dtype=np.uint64)[0]) >> 1
