"""Content-addressed blob store: payload in, 32-byte CID out.

A CID is the SHA-256 digest of the payload, nothing more — no multihash
framing, so the identifier is exactly 32 bytes. Blobs live one file per
CID under a content root, named by the hex digest; that layout makes
out-of-band tampering detectable (and testable), since every read
re-hashes the bytes and compares against the requested CID.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .hashing import DIGEST_SIZE, digest


class CidStoreError(Exception):
    pass


class NotFound(CidStoreError):
    pass


class IntegrityViolation(CidStoreError):
    pass


class StoreUnavailable(CidStoreError):
    pass


@dataclass(frozen=True, order=True)
class Cid:
    """32-byte content identifier, rendered as lowercase hex."""

    digest: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.digest, bytes) or len(self.digest) != DIGEST_SIZE:
            raise ValueError("cid must be exactly 32 bytes")

    @classmethod
    def of(cls, payload: bytes) -> "Cid":
        return cls(digest(payload))

    @classmethod
    def from_hex(cls, text: str) -> "Cid":
        return cls(bytes.fromhex(text))

    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return self.hex()


class CidStore:
    """File-backed store. put is idempotent; get verifies integrity.

    Concurrent puts of identical bytes are benign: both writers produce
    the same content under the same name (writes go through a temp file
    plus atomic rename).
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StoreUnavailable(f"cannot create content root {root}: {exc}") from exc

    def path_for(self, cid: Cid) -> Path:
        return self.root / cid.hex()

    def put(self, payload: bytes) -> Cid:
        cid = Cid.of(payload)
        target = self.path_for(cid)
        if target.exists():
            return cid
        try:
            fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".put-")
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, target)
        except OSError as exc:
            raise StoreUnavailable(f"write failed for {cid}: {exc}") from exc
        return cid

    def get(self, cid: Cid) -> bytes:
        target = self.path_for(cid)
        if not target.exists():
            raise NotFound(f"no blob for cid {cid}")
        try:
            payload = target.read_bytes()
        except OSError as exc:
            raise StoreUnavailable(f"read failed for {cid}: {exc}") from exc
        if Cid.of(payload) != cid:
            raise IntegrityViolation(f"stored bytes no longer hash to {cid}")
        return payload

    def has(self, cid: Cid) -> bool:
        return self.path_for(cid).exists()
