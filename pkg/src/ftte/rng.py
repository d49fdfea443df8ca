"""Deterministic random-number utilities shared by every component.

All randomness in an experiment fans out from one 64-bit master seed, and
every stream must be reproducible bit-for-bit from that seed alone. Two
published primitives provide this:

* Bulk sampling uses numpy's Philox-4x64-10 counter-based generator,
  keyed directly with a 64-bit integer (``Philox(key=seed)``). Keying
  bypasses numpy's entropy-pool seeding, so the stream is exactly the
  documented Philox function of the key.
* Child seeds are derived with the splitmix64 finalizer over a path of
  labels: strings are hashed with FNV-1a 64 first, integers are used
  as-is, and each path element is folded in with one splitmix64 step.

Both algorithms are small enough to restate in any language, which keeps
simulation traces comparable across reimplementations.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash of a byte string."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def mix64(x: int) -> int:
    """One splitmix64 step: golden-ratio increment plus the finalizer."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(master: int, *path: str | int) -> int:
    """Derive an independent child seed from a master seed and a label path.

    Each path element (string or non-negative integer) is xor-folded into
    the running state and passed through ``mix64``. Identical paths give
    identical seeds; distinct paths give statistically independent ones.
    """
    state = master & MASK64
    for part in path:
        if isinstance(part, str):
            part = fnv1a64(part.encode("utf-8"))
        elif not isinstance(part, int):
            raise TypeError(f"seed path elements must be str or int, got {type(part).__name__}")
        state = mix64(state ^ (part & MASK64))
    return state


def make_rng(seed: int) -> np.random.Generator:
    """Philox-4x64-10 generator keyed with the given 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=seed & MASK64))
