"""Seeding, hashing, and canonical-JSON helpers shared across modules."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def stable_seed(*parts) -> int:
    """Derive a 63-bit seed from arbitrary string/int parts.

    Uses SHA-256 so the result is stable across processes and platforms,
    unlike hash().
    """
    text = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_from(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))


def canonical_json(obj) -> str:
    """Deterministic JSON text (sorted keys, compact separators)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj) -> str:
    return sha256_bytes(canonical_json(obj).encode("utf-8"))
