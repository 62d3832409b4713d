"""Binary tensor container (see docs/checkpoint-format.md).

Layout: 8-byte magic "KLCKPT01", then self-describing records
(u32 name length, UTF-8 name, u8 dtype code, u8 rank, u64 extents,
raw little-endian values), then a trailing u32 CRC-32 of all preceding
bytes. All integers are little-endian.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"KLCKPT01"

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int64): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    """Malformed or corrupted checkpoint file."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # note: would promote 0-d, but 0-d is always contiguous
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        name_b = name.encode("utf-8")
        header = struct.pack("<I", len(name_b)) + name_b + struct.pack("<BB", code, arr.ndim)
        header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
        chunks.append(header)
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    blob = b"".join(chunks)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4:
        raise CheckpointError(f"{path}: truncated ({len(blob)} bytes)")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}, expected {MAGIC!r}")
    body, stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if stored != actual:
        raise CheckpointError(f"{path}: checksum mismatch (stored {stored:#010x}, computed {actual:#010x})")

    tensors: dict[str, np.ndarray] = {}
    pos = len(MAGIC)
    end = len(body)
    while pos < end:
        if pos + 4 > end:
            raise CheckpointError(f"{path}: truncated record header at byte {pos}")
        (name_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, rank = struct.unpack_from("<BB", body, pos)
        pos += 2
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype code {code} in record {name!r}")
        shape = struct.unpack_from(f"<{rank}Q", body, pos) if rank else ()
        pos += 8 * rank
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if pos + nbytes > end:
            raise CheckpointError(f"{path}: record {name!r} wants {nbytes} bytes, file has {end - pos}")
        arr = np.frombuffer(body, dtype=dtype.newbyteorder("<"), count=int(np.prod(shape, dtype=np.int64)) if rank else 1, offset=pos)
        tensors[name] = arr.astype(dtype).reshape(shape).copy()
        pos += nbytes
    return tensors
