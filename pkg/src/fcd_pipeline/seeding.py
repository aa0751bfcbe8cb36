"""Deterministic seed derivation and reproducibility checksums.

Every stochastic stage (dataset sampling, weight init, shuffling, fold
training) draws its seed from :func:`derive_seed` so that parallel and
serial execution, and re-runs with the same base seed, produce identical
results on any platform. Python's builtin ``hash`` is salted per process
and must never be used for this.
"""

from __future__ import annotations

import hashlib
from typing import Iterable

_SEED_MOD = 2**32


def derive_seed(base_seed: int, *tokens: object) -> int:
    """Derive a child seed from a base seed and a sequence of tokens.

    The derivation is a SHA-256 hash of the decimal base seed and the
    string forms of the tokens, reduced to a 32-bit integer. Stable
    across runs, platforms and Python versions.
    """
    h = hashlib.sha256()
    h.update(str(int(base_seed)).encode("utf-8"))
    for tok in tokens:
        h.update(b"|")
        h.update(str(tok).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") % _SEED_MOD


def checksum_lines(lines: Iterable[str]) -> str:
    """SHA-256 hex digest over sorted text lines (order-insensitive)."""
    h = hashlib.sha256()
    for line in sorted(lines):
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def checksum_bytes(data: bytes) -> str:
    """SHA-256 hex digest of a byte string."""
    return hashlib.sha256(data).hexdigest()
