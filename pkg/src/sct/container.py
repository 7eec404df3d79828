"""Named-tensor binary container.

Layout, little-endian, no padding::

    b"SCTW"                      magic
    u32  version = 1
    u32  tensor count
    per tensor:
        u16  name length, then UTF-8 name bytes
        u8   rank, then rank x u64 extents
        u8   dtype tag (0 = float32, 1 = uint32)
        raw row-major payload (4 bytes per element)

Checkpoints, datasets and trained artifacts all use this container.
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np
from numba import njit, uint64

from .errors import (
    BadMagicError,
    DuplicateNameError,
    FormatError,
    TruncatedFileError,
    VersionMismatchError,
)

MAGIC = b"SCTW"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<u4")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("uint32"): 1}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@njit(cache=True)
def _fnv1a(buf, h):
    for i in range(buf.shape[0]):
        h = (h ^ uint64(buf[i])) * uint64(0x100000001B3)
    return h


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a (offset 0xcbf29ce484222325, prime 0x100000001b3)."""
    return int(_fnv1a(np.frombuffer(data, dtype=np.uint8), np.uint64(FNV_OFFSET)))


def file_fingerprint(path) -> str:
    return f"{fnv1a64(Path(path).read_bytes()):016x}"


def _as_array(value) -> np.ndarray:
    arr = value.data if hasattr(value, "data") and not isinstance(value, np.ndarray) else value
    arr = np.asarray(arr)
    if arr.dtype not in _TAG_OF:
        raise FormatError(f"unsupported dtype {arr.dtype}; container holds float32 or uint32")
    return arr


def encode(tensors: Mapping[str, object]) -> bytes:
    """Serialise an ordered name -> array mapping (Tensors or numpy arrays)."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = _as_array(value)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} has rank {arr.ndim} > 255")
        tag = _TAG_OF[arr.dtype]
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    return b"".join(parts)


def encoded_size(shapes: Mapping[str, tuple[int, ...]]) -> int:
    """Byte size of a container holding tensors of the given shapes (4-byte dtypes)."""
    total = len(MAGIC) + 8
    for name, shape in shapes.items():
        total += 2 + len(name.encode("utf-8")) + 1 + 8 * len(shape) + 1 + 4 * int(np.prod(shape, dtype=np.int64))
    return total


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file truncated while reading {what} at byte {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk


def decode(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    r.pos = 4
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != VERSION:
        raise VersionMismatchError(f"container version {version} unsupported (expected {VERSION})")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2, "name length"))
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor name at byte {r.pos - nlen} is not UTF-8") from exc
        if name in out:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", r.take(1, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"extents of {name}"))
        (tag,) = struct.unpack("<B", r.take(1, f"dtype of {name}"))
        if tag not in DTYPE_TAGS:
            raise FormatError(f"tensor {name!r} has unknown dtype tag {tag}")
        n = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * n, f"payload of {name}")
        arr = np.frombuffer(payload, dtype=DTYPE_TAGS[tag]).astype(DTYPE_TAGS[tag].newbyteorder("="))
        out[name] = arr.reshape(shape)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return out


def save(path, tensors: Mapping[str, object]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors))
    os.replace(tmp, path)


def load(path) -> "OrderedDict[str, np.ndarray]":
    return decode(Path(path).read_bytes())
