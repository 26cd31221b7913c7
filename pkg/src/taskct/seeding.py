"""Deterministic seed derivation.

Every stochastic stage (phantom generation, noise realization, weight init,
shuffling, validation split) draws its seed from derive_seed so that runs are
reproducible bit-for-bit and parallel workers cannot reorder randomness.
blake2b is used instead of hash() because the latter is salted per process.
"""

import hashlib


def derive_seed(*parts) -> int:
    """Map an arbitrary tuple of parts to a stable 63-bit seed."""
    key = "/".join(str(p) for p in parts)
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)
