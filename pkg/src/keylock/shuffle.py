"""Secret-key block-wise permutation of (c, h, w) feature maps.

A feature map is segmented into an M-by-M grid of spatial blocks, each block
is flattened channel-major (channel, row, column) into a vector of length
n = c * M * M, and every block vector is shuffled with the same permutation:
out[k] = in[perm[k]]. The permutation is derived deterministically from a
128-bit key, domain-separated by n, so one key locks any number of feature
maps of different sizes.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from collections.abc import Iterator

import numpy as np

from .keys import SecretKey


@dataclass(frozen=True)
class BlockSpec:
    """Block geometry: block_size x block_size spatial blocks over `channels` maps."""

    block_size: int
    channels: int

    def __post_init__(self):
        if self.block_size < 1 or self.channels < 1:
            raise ValueError("block_size and channels must be >= 1")

    @property
    def n(self) -> int:
        """Length of the flattened block vector, channels * block_size**2."""
        return self.channels * self.block_size * self.block_size


class _HashStream:
    """Deterministic uint64 stream: SHA-256(material || counter) blocks.

    Frozen implementation constant: the counter is 8-byte big-endian, each
    digest yields four big-endian uint64 words consumed in order. Not a
    cryptographic guarantee, just a portable reproducible stream.
    """

    def __init__(self, material: bytes):
        self._material = material
        self._counter = 0
        self._words: list[int] = []
        self._pos = 0

    def _refill(self) -> None:
        block = hashlib.sha256(self._material + self._counter.to_bytes(8, "big")).digest()
        self._counter += 1
        self._words = [int.from_bytes(block[i : i + 8], "big") for i in (0, 8, 16, 24)]
        self._pos = 0

    def next_u64(self) -> int:
        if self._pos >= len(self._words):
            self._refill()
        word = self._words[self._pos]
        self._pos += 1
        return word

    def below(self, bound: int) -> int:
        """Unbiased draw from [0, bound) by rejection sampling."""
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % bound


def derive_permutation(key: SecretKey, n: int) -> np.ndarray:
    """Derive the length-n permutation bound to `key`.

    Deterministic in (key.seed, n): the hash stream is keyed with
    seed || n-as-8-byte-big-endian and drives a Fisher-Yates shuffle of
    [0, n). Distinct n give independent-looking permutations under the
    same key.
    """
    if n < 1:
        raise ValueError(f"permutation length must be >= 1, got {n}")
    stream = _HashStream(key.seed + n.to_bytes(8, "big"))
    perm = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = stream.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def as_permutation(perm, n: int | None = None) -> np.ndarray:
    """Validate that `perm` is a bijection on [0, len(perm)) and return it as int64."""
    v = np.asarray(perm, dtype=np.int64)
    if v.ndim != 1:
        raise ValueError("permutation must be one-dimensional")
    if n is not None and len(v) != n:
        raise ValueError(f"permutation has length {len(v)}, expected {n}")
    if not np.array_equal(np.sort(v), np.arange(len(v))):
        raise ValueError("not a permutation: entries must be a bijection on [0, n)")
    return v


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm), dtype=perm.dtype)
    return inv


def _as_batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"feature map must have shape (c,h,w) or (N,c,h,w), got {x.shape}")


def _check_geometry(x4: np.ndarray, perm: np.ndarray, spec: BlockSpec) -> None:
    _, c, h, w = x4.shape
    m = spec.block_size
    if c != spec.channels:
        raise ValueError(f"feature map has {c} channels, spec expects {spec.channels}")
    if h % m != 0 or w % m != 0:
        raise ValueError(f"spatial dims ({h},{w}) not divisible by block size {m}; refusing to pad")
    if len(perm) != spec.n:
        raise ValueError(f"permutation length {len(perm)} != c*M*M = {spec.n}")


def _blockify(x4: np.ndarray, m: int) -> np.ndarray:
    """(N,c,h,w) -> (N, h/m, w/m, c*m*m) with channel-major flattening per block."""
    n_, c, h, w = x4.shape
    xb = x4.reshape(n_, c, h // m, m, w // m, m)
    xb = xb.transpose(0, 2, 4, 1, 3, 5)
    return xb.reshape(n_, h // m, w // m, c * m * m)


def _unblockify(flat: np.ndarray, m: int, c: int, h: int, w: int) -> np.ndarray:
    n_ = flat.shape[0]
    xb = flat.reshape(n_, h // m, w // m, c, m, m)
    xb = xb.transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(xb.reshape(n_, c, h, w))


def apply_block_shuffle(x: np.ndarray, perm: np.ndarray, spec: BlockSpec) -> np.ndarray:
    """Shuffle every block of `x` with `perm`: output vector b' has b'[k] = b[perm[k]].

    Accepts (c,h,w) or a batched (N,c,h,w) array; the same permutation is
    applied to every block of every sample.
    """
    x4, squeeze = _as_batched(x)
    _check_geometry(x4, perm, spec)
    _, c, h, w = x4.shape
    out = _unblockify(_blockify(x4, spec.block_size)[..., perm], spec.block_size, c, h, w)
    return out[0] if squeeze else out


def invert_block_shuffle(x: np.ndarray, perm: np.ndarray, spec: BlockSpec) -> np.ndarray:
    """Exact inverse of apply_block_shuffle; bit-for-bit since only values move."""
    return apply_block_shuffle(x, invert_permutation(np.asarray(perm, dtype=np.int64)), spec)


def shuffle_vjp(g_out: np.ndarray, perm: np.ndarray, spec: BlockSpec) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the shuffle input, given the output gradient.

    A fixed permutation is a linear orthogonal map, so the vector-Jacobian
    product is the inverse shuffle of the incoming gradient.
    """
    return invert_block_shuffle(g_out, perm, spec)


def key_space(spec: BlockSpec) -> int:
    """Number of distinct block permutations: (c * M * M)! as an exact integer."""
    return math.factorial(spec.n)


def pair_count(n: int) -> int:
    """Number of unordered index pairs over [0, n): n(n-1)/2."""
    if n < 2:
        raise ValueError(f"pair_count needs n >= 2, got {n}")
    return n * (n - 1) // 2


def iter_index_pairs(n: int) -> Iterator[tuple[int, int]]:
    """The ordered pair set (0,1), (0,2), ..., (n-2, n-1)."""
    for i in range(n - 1):
        for j in range(i + 1, n):
            yield i, j
