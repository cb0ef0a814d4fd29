"""Single hashing primitive shared by every subsystem.

SHA-256 is used for content identifiers, transaction hashes, contract
addresses and method selectors, so cross-module identities agree
byte-for-byte.
"""

from __future__ import annotations

import hashlib

DIGEST_SIZE = 32


def digest(payload: bytes) -> bytes:
    """256-bit digest of raw payload bytes."""
    return hashlib.sha256(payload).digest()


def selector(method: str) -> bytes:
    """4-byte call selector: first four bytes of the method-name digest."""
    return digest(method.encode("ascii"))[:4]
