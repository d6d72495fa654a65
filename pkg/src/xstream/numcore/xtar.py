"""Flat tensor-archive container for checkpoints.

Layout, all integers little-endian:

    magic   4 bytes  b"XTAR"
    version u8       currently 1
    count   u32      number of entries
    entry*  count times:
        name_len u16
        name     name_len bytes, UTF-8
        rank     u8
        dims     rank x u32
        payload  prod(dims) float32 values, little-endian

Entries are written in sorted name order so identical state produces an
identical byte stream. Values are stored as float32 regardless of the
in-memory dtype; rank 0 encodes a scalar.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from ..errors import ProtocolError

MAGIC = b"XTAR"
VERSION = 1

_MAX_RANK = 8
_MAX_NAME = 65535


def _write_exact(f: BinaryIO, data: bytes) -> None:
    f.write(data)


def _read_exact(f: BinaryIO, n: int, offset: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ProtocolError(f"archive truncated reading {what}", offset + len(data))
    return data


def save_xtar(dest, arrays: dict[str, np.ndarray]) -> None:
    """Write named float arrays to a path or binary file object."""
    if hasattr(dest, "write"):
        _save_stream(dest, arrays)
    else:
        with open(dest, "wb") as f:
            _save_stream(f, arrays)


def _save_stream(f: BinaryIO, arrays: dict[str, np.ndarray]) -> None:
    _write_exact(f, MAGIC)
    _write_exact(f, struct.pack("<BI", VERSION, len(arrays)))
    for name in sorted(arrays):
        # asarray, not ascontiguousarray: the latter promotes rank 0 to rank 1
        arr = np.asarray(arrays[name], dtype="<f4", order="C")
        nb = name.encode("utf-8")
        if len(nb) > _MAX_NAME:
            raise ProtocolError(f"entry name too long ({len(nb)} bytes)", 0)
        if arr.ndim > _MAX_RANK:
            raise ProtocolError(f"entry {name!r} rank {arr.ndim} exceeds {_MAX_RANK}", 0)
        _write_exact(f, struct.pack("<H", len(nb)))
        _write_exact(f, nb)
        _write_exact(f, struct.pack("<B", arr.ndim))
        for d in arr.shape:
            _write_exact(f, struct.pack("<I", d))
        _write_exact(f, arr.tobytes())


def load_xtar(src) -> dict[str, np.ndarray]:
    """Read an archive from a path or binary file object into float32 arrays."""
    if hasattr(src, "read"):
        return _load_stream(src)
    with open(src, "rb") as f:
        return _load_stream(f)


def _load_stream(f: BinaryIO) -> dict[str, np.ndarray]:
    offset = 0
    magic = _read_exact(f, 4, offset, "magic")
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    offset += 4
    head = _read_exact(f, 5, offset, "header")
    version, count = struct.unpack("<BI", head)
    if version != VERSION:
        raise ProtocolError(f"unsupported archive version {version}", offset)
    offset += 5
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(f, 2, offset, "name length"))
        offset += 2
        name = _read_exact(f, name_len, offset, "name").decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack("<B", _read_exact(f, 1, offset, "rank"))
        offset += 1
        if rank > _MAX_RANK:
            raise ProtocolError(f"entry {name!r} rank {rank} exceeds {_MAX_RANK}", offset)
        dims = []
        for _ in range(rank):
            (d,) = struct.unpack("<I", _read_exact(f, 4, offset, "dims"))
            dims.append(d)
            offset += 4
        n = 1
        for d in dims:
            n *= d
        payload = _read_exact(f, 4 * n, offset, f"payload of {name!r}")
        offset += 4 * n
        if name in out:
            raise ProtocolError(f"duplicate entry {name!r}", offset)
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    trailing = f.read(1)
    if trailing:
        raise ProtocolError("trailing bytes after final entry", offset)
    return out


def dumps_xtar(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    _save_stream(buf, arrays)
    return buf.getvalue()


def loads_xtar(data: bytes) -> dict[str, np.ndarray]:
    return _load_stream(io.BytesIO(data))
