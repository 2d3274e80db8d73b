"""Deterministic RNG stream derivation.

Every source of randomness in the pipeline is derived from one global seed
plus a tuple of string labels (purpose, document id, step, ...), so that
independent components draw from independent, reproducible streams regardless
of call order.
"""

from __future__ import annotations

import hashlib
import random


def derive_seed(seed: int, *labels: object) -> int:
    """Hash (seed, labels) into a 63-bit integer seed."""
    key = "|".join([str(seed)] + [str(label) for label in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def derive_rng(seed: int, *labels: object) -> random.Random:
    """A `random.Random` seeded from the derived stream for (seed, labels)."""
    return random.Random(derive_seed(seed, *labels))
