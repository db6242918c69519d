"""Keyed random streams.

All randomness flows from a 64-bit seed through numpy's counter-based
Philox generator.  A stream is identified by ``(seed, purpose, index)``; the
purpose string is hashed into a stable integer so that adding or
parallelising consumers never shifts the draws of existing ones.
"""

import hashlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def _tag(purpose: str) -> int:
    return int.from_bytes(hashlib.sha256(purpose.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Return an independent generator for ``(seed, purpose, index)``."""
    ss = np.random.SeedSequence(entropy=int(seed) & SEED_MASK, spawn_key=(_tag(purpose), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"uint64": [int(v) for v in obj.reshape(-1)]}
    return obj


def _arrays(obj):
    if isinstance(obj, dict):
        if set(obj) == {"uint64"}:
            return np.array(obj["uint64"], dtype=np.uint64)
        return {k: _arrays(v) for k, v in obj.items()}
    return obj


def get_state(rng: np.random.Generator) -> dict:
    """Generator state as plain JSON-serialisable Python values."""
    return _plain(rng.bit_generator.state)


def set_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = _arrays(state)


def derive_seed(seed: int, purpose: str, index: int = 0) -> int:
    """A 63-bit child seed for a sub-run, stable under reordering of sub-runs."""
    ss = np.random.SeedSequence(entropy=int(seed) & SEED_MASK, spawn_key=(_tag(purpose), int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
