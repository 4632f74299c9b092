"""Shared helpers: seed derivation and JSON-safe number handling."""

from __future__ import annotations

import hashlib
import math


def derive_seed(root: int, *parts) -> int:
    """Derive a 64-bit sub-seed from a root seed and a label path.

    Stable across processes and platforms (unlike the builtin salted hash),
    so every consumer of randomness can be rerun independently.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little")


def json_safe(value):
    """Map non-finite floats to strings so emitted JSON stays standard."""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
    return value
