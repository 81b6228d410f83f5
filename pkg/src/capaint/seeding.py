"""Stable seed derivation for reproducible, independently seeded sub-tasks."""

import hashlib

_MASK63 = (1 << 63) - 1


def derive_seed(*parts) -> int:
    """Derive a stable 63-bit seed from a base seed and context parts.

    Hash-based so that (seed, epoch, source_id)-style derivations are
    independent of each other and reproducible across runs and platforms.
    """
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little") & _MASK63
