"""Deterministic derivation of independent RNG seeds from tagged parts."""

import hashlib


def derive_seed(*parts) -> int:
    """Map a tuple of hashable tags to a stable 63-bit seed.

    The mapping is a content hash, so it is independent of process, platform,
    and interpreter hash randomization.
    """
    text = ":".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
