"""Independent FVW1 reader/writer.

The pack layout (little-endian throughout):

    magic "FVW1"
    u32   tensor count
    per tensor:
        u16  name length + UTF-8 name
        u8   dtype code (0 = float32)
        u8   ndim
        u32 x ndim dims
        row-major float32 payload

This module deliberately re-implements the format rather than importing the
consumer library: the byte layout is the contract between the two packages,
and writing it independently keeps that contract honest.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FVW1"
DTYPE_F32 = 0


def write_pack(tensors: dict[str, np.ndarray], path) -> None:
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor name")
    chunks = [MAGIC, struct.pack("<I", len(names))]
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def read_pack(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an FVW1 pack")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        dtype, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        if dtype != DTYPE_F32:
            raise ValueError(f"{path}: unsupported dtype {dtype}")
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if ndim else 4
        out[name] = np.frombuffer(buf[off : off + nbytes], dtype="<f4").reshape(dims)
        off += nbytes
    return out
