"""Deterministic seed derivation for independent RNG streams."""

import hashlib


def derive_seed(root: int, *parts) -> int:
    """Derive a u64 seed from a root seed and a label path.

    Streams for different labels are independent of each other, so adding
    a new stage or method never perturbs the randomness of existing ones.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for part in parts:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little")
