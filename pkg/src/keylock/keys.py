"""Secret keys: generation, fingerprints, and key-file I/O.

Key file format (see docs/key-format.md): first line is the 128-bit seed as
32 lowercase hex characters, optional second line is a free-form label.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SEED_BYTES = 16
_HEX_CHARS = set("0123456789abcdef")


@dataclass(frozen=True)
class SecretKey:
    """128-bit seed from which every permutation is derived.

    Keys with equal seed bytes are interchangeable; the label is metadata
    only and never enters any derivation.
    """

    seed: bytes
    label: str | None = None

    def __post_init__(self):
        if not isinstance(self.seed, bytes) or len(self.seed) != SEED_BYTES:
            raise ValueError(f"key seed must be exactly {SEED_BYTES} bytes")

    def fingerprint(self) -> str:
        """First 8 hex chars of SHA-256 of the seed; safe to log and persist."""
        return hashlib.sha256(self.seed).hexdigest()[:8]

    def __repr__(self) -> str:  # never leak the seed in logs/tracebacks
        label = f", label={self.label!r}" if self.label else ""
        return f"SecretKey(fingerprint={self.fingerprint()}{label})"


def generate_key(rng: np.random.Generator | None = None, label: str | None = None) -> SecretKey:
    """Draw a fresh key, from `rng` for reproducible runs or os.urandom otherwise."""
    seed = bytes(rng.bytes(SEED_BYTES)) if rng is not None else os.urandom(SEED_BYTES)
    return SecretKey(seed, label)


def save_key(key: SecretKey, path: str | Path) -> None:
    lines = [key.seed.hex()]
    if key.label:
        lines.append(key.label)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_key(path: str | Path) -> SecretKey:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].strip():
        raise ValueError(f"empty key file: {path}")
    hexseed = lines[0].strip()
    if len(hexseed) != 2 * SEED_BYTES or not set(hexseed) <= _HEX_CHARS:
        raise ValueError(
            f"key file {path}: first line must be {2 * SEED_BYTES} lowercase hex characters"
        )
    label = lines[1].strip() if len(lines) > 1 and lines[1].strip() else None
    return SecretKey(bytes.fromhex(hexseed), label)
