"""Shared helpers: seed derivation, rounding, hashing, atomic file writes."""

import hashlib
import math
import os
from typing import Iterable


def derive_seed(*parts) -> int:
    """Derive a 63-bit seed from a sequence of labels (ints, strings).

    Every random decision in a pipeline flows from the manifest's global seed
    through this function, keyed by stage/model/purpose labels, so adding a
    stage never perturbs the seeds of earlier stages.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") & 0x7FFFFFFFFFFFFFFF


def round_half_up(x: float) -> int:
    """Round with .5 going up; declared so sampling sizes are exact in tests."""
    return int(math.floor(x + 0.5))


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def short_hash(data: bytes, n: int = 12) -> str:
    return hashlib.sha256(data).hexdigest()[:n]


def hash_strings(items: Iterable[str]) -> str:
    h = hashlib.sha256()
    for s in items:
        h.update(s.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temp file + rename so readers never see partial content."""
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
