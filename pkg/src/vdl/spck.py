"""Reader/writer for the ``SPCK`` named-tensor container.

Layout (all integers little-endian)::

    b"SPCK" | u16 version
    repeated until EOF:
        u16 name_len | name (utf-8) | u8 rank | u32 dim * rank | f32 data (row-major)

Rank-0 tensors hold one value and are used for scalars.
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"SPCK"
VERSION = 1


class SpckError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray | float | int]) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise SpckError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise SpckError(f"tensor {name!r} has too many dimensions")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise SpckError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 6:
        raise SpckError("truncated header")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise SpckError(f"unsupported SPCK version {version}")
    pos = 6
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 4 * count
            if pos + nbytes > len(buf):
                raise SpckError(f"truncated data for tensor {name!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
            out[name] = arr.reshape(dims).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise SpckError(f"truncated SPCK stream at byte {pos}") from exc
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray | float | int]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(tensors))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
