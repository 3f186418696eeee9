"""Binary array container used for datasets, checkpoints and score matrices.

Layout (little-endian)::

    b"IMCS" | u32 version=1 | u32 n_arrays
    per array: u16 name_len | name (utf-8) | u8 dtype (1 = f64) | u8 rank
               | rank x u64 dims | row-major data
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContainerError

MAGIC = b"IMCS"
VERSION = 1
DTYPE_F64 = 1


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ContainerError(f"array name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(buf) < 16:
        raise ContainerError("file too short to be a container")
    if buf[:4] != MAGIC:
        raise ContainerError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ContainerError("CRC mismatch: file is corrupt or truncated")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    pos = 12
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dtype, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            if dtype != DTYPE_F64:
                raise ContainerError(f"array {name!r}: unknown dtype code {dtype}")
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            nbytes = 8 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(body):
                raise ContainerError(f"array {name!r} runs past end of file")
            out[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise ContainerError(f"truncated container: {exc}") from exc
    if pos != len(body):
        raise ContainerError(f"{len(body) - pos} trailing bytes after last array")
    return out


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())
