"""Flat binary container for named float64 arrays.

Layout (all integers little-endian)::

    b"CSSM"            magic
    u32                version (currently 1)
    u32                number of entries
    repeated:
        u16            name length in bytes
        bytes          UTF-8 name
        u8             rank
        u64 * rank     dims
        f64 * prod     raw values, C order

Every weight, feature and checkpoint file in the package uses this format.
"""

from __future__ import annotations

import math
import os
import struct
from typing import Mapping

import numpy as np

from .errors import CobraError

MAGIC = b"CSSM"
VERSION = 1

__all__ = ["ContainerFormatError", "MAGIC", "VERSION", "dumps", "loads", "read", "write"]


class ContainerFormatError(CobraError, ValueError):
    """Raised for malformed container bytes; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = np.asarray(value, dtype="<f8", order="C")  # keeps 0-d shape
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError(f"rank {arr.ndim} too large for entry {name!r}")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerFormatError(
                f"truncated container: needed {n} bytes for {what}, "
                f"{len(self.data) - self.pos} available",
                self.pos,
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes) -> dict[str, np.ndarray]:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}, expected {MAGIC!r} ('CSSM')", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise ContainerFormatError(f"unsupported container version {version}, expected {VERSION}", 4)
    (count,) = r.unpack("<I", "entry count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H", "name length")
        try:
            name = r.take(name_len, "entry name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerFormatError(f"entry name is not UTF-8: {exc}", start + 2) from None
        if name in out:
            raise ContainerFormatError(f"duplicate entry {name!r}", start)
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}") if rank else ()
        size = math.prod(dims)  # python ints: no overflow on hostile headers
        raw = r.take(8 * size, f"data of {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(data):
        raise ContainerFormatError(f"{len(data) - r.pos} trailing bytes after last entry", r.pos)
    return out


def write(path: str | os.PathLike, entries: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(entries))


def read(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
