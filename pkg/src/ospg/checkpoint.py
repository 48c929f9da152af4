"""Minimal binary tensor-table format.

Layout (all integers little-endian u32)::

    b"OSPG" | version | count | entries...
    entry := name_len | name (UTF-8) | rank | dims[rank] | dtype (0 = f32 LE) | data

The whole header chain is walked and the size arithmetic checked against the
file length before any tensor data is materialized.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"OSPG"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    def __init__(self, kind: str, offset: int, detail: str):
        self.kind, self.offset, self.detail = kind, offset, detail
        super().__init__(f"checkpoint {kind} error at byte {offset}: {detail}")


class BadMagic(CheckpointError):
    def __init__(self, offset: int, detail: str):
        super().__init__("magic", offset, detail)


class VersionMismatch(CheckpointError):
    def __init__(self, offset: int, detail: str):
        super().__init__("version", offset, detail)


class SizeMismatch(CheckpointError):
    def __init__(self, offset: int, detail: str):
        super().__init__("size", offset, detail)


class FormatError(CheckpointError):
    def __init__(self, offset: int, detail: str):
        super().__init__("format", offset, detail)


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise TypeError(f"{name}: only float32 tensors can be stored, got {arr.dtype}")
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts += [_U32.pack(0), np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    return b"".join(parts)


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def _u32(buf: bytes, off: int, what: str) -> tuple[int, int]:
    if off + 4 > len(buf):
        raise SizeMismatch(off, f"file ends while reading {what} ({len(buf)} bytes total)")
    return _U32.unpack_from(buf, off)[0], off + 4


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(0, f"expected {MAGIC!r}, found {bytes(buf[:4])!r}")
    version, off = _u32(buf, 4, "version")
    if version != VERSION:
        raise VersionMismatch(4, f"unsupported format version {version} (expected {VERSION})")
    count, off = _u32(buf, off, "tensor count")
    plan = []
    names = set()
    for i in range(count):
        start = off
        n, off = _u32(buf, off, f"name length of entry {i}")
        if off + n > len(buf):
            raise SizeMismatch(off, f"name of entry {i} runs past end of file")
        try:
            name = bytes(buf[off:off + n]).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(off, f"entry {i} name is not UTF-8: {e}") from None
        off += n
        if name in names:
            raise FormatError(start, f"duplicate tensor name {name!r}")
        names.add(name)
        rank, off = _u32(buf, off, f"rank of {name!r}")
        if rank > 8:
            raise FormatError(off - 4, f"{name!r}: implausible rank {rank}")
        dims = []
        for _ in range(rank):
            d, off = _u32(buf, off, f"dims of {name!r}")
            dims.append(d)
        code, off = _u32(buf, off, f"dtype of {name!r}")
        if code not in DTYPES:
            raise FormatError(off - 4, f"{name!r}: unknown dtype code {code}")
        nbytes = DTYPES[code].itemsize * int(np.prod(dims, dtype=np.int64))
        if off + nbytes > len(buf):
            raise SizeMismatch(off, f"{name!r} needs {nbytes} data bytes, only {len(buf) - off} remain")
        plan.append((name, tuple(dims), DTYPES[code], off))
        off += nbytes
    if off != len(buf):
        raise SizeMismatch(off, f"{len(buf) - off} trailing bytes after the last tensor")
    out = {}
    for name, dims, dt, start in plan:
        n = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype=dt, count=n, offset=start).reshape(dims).astype(np.float32)
    return out


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    return decode(buf)
