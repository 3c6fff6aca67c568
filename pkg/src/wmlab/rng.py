"""Deterministic seed derivation.

All randomness flows from one root seed through named sub-streams so that
world generation, initialization, masking, and sampling can be perturbed
independently without touching each other. Derivation is a stable hash, so it
is reproducible across processes and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *names) -> int:
    """64-bit seed for the sub-stream identified by `names` under `root`."""
    key = ":".join([str(int(root))] + [str(n) for n in names])
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(root: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))
