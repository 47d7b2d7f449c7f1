"""Deterministic little-endian container for named arrays plus JSON meta.

Used for model checkpoints. The format is fixed byte-for-byte (sorted
array names, canonical JSON meta, no timestamps) because the determinism
contract promises byte-identical artifacts for identical seed and config;
zip-based formats stamp member times and fail that.

Layout, all integers little-endian:

    magic        8 bytes   b"LDNCONT\\0"
    version      u32       1
    kind         4 bytes   container role tag (e.g. b"CKPT")
    meta_len     u32
    meta         meta_len bytes of UTF-8 canonical JSON (sorted keys)
    count        u32       number of arrays
    per array, in ascending name order:
        name_len u16, name bytes (UTF-8)
        dtype    u8        0 = float64, 1 = int64
        ndim     u8
        dims     ndim * u32
        data     raw little-endian C-order bytes
"""

from __future__ import annotations

import json
import struct

import numpy as np

__all__ = ["write_container", "read_container", "canonical_json"]

_MAGIC = b"LDNCONT\0"
_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1}


def canonical_json(obj) -> str:
    """Compact JSON with sorted keys; the digest/serialization form."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_container(path, kind: bytes, meta: dict, arrays: dict) -> None:
    if len(kind) != 4:
        raise ValueError("kind tag must be exactly 4 bytes")
    chunks = [_MAGIC, struct.pack("<I", _VERSION), kind]
    meta_bytes = canonical_json(meta).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        # np.asarray, not np.ascontiguousarray: the latter silently turns
        # 0-d arrays into shape (1,), which would not round-trip.
        arr = np.asarray(arrays[name], order="C")
        if arr.dtype == np.float64:
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype == np.int64:
            arr = arr.astype("<i8", copy=False)
        else:
            raise TypeError(f"array {name!r} has unsupported dtype {arr.dtype}")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_container(path, kind: bytes):
    """Returns (meta dict, arrays dict). Raises ValueError on a bad file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise ValueError(f"truncated container: need {n} bytes at offset {off}")
        out = blob[off:off + n]
        off += n
        return out

    if take(8) != _MAGIC:
        raise ValueError(f"not a container file: bad magic in {path}")
    version = struct.unpack("<I", take(4))[0]
    if version != _VERSION:
        raise ValueError(f"unsupported container version {version}")
    file_kind = take(4)
    if file_kind != kind:
        raise ValueError(f"container kind {file_kind!r}, expected {kind!r}")
    meta_len = struct.unpack("<I", take(4))[0]
    meta = json.loads(take(meta_len).decode("utf-8"))
    count = struct.unpack("<I", take(4))[0]
    arrays = {}
    for _ in range(count):
        name_len = struct.unpack("<H", take(2))[0]
        name = take(name_len).decode("utf-8")
        dcode, ndim = struct.unpack("<BB", take(2))
        if dcode not in _DTYPES:
            raise ValueError(f"unknown dtype code {dcode} for array {name!r}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _DTYPES[dcode]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        data = take(nbytes)
        arrays[name] = np.frombuffer(data, dtype=dtype).reshape(dims).copy()
    if off != len(blob):
        raise ValueError(f"{len(blob) - off} trailing bytes after container payload")
    return meta, arrays
