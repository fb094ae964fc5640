"""FVW1 binary tensor-pack format.

Layout (all integers little-endian):

    magic "FVW1"
    u32   tensor count
    per tensor:
        u16   name length, then UTF-8 name
        u8    dtype (0 = float32)
        u8    ndim
        u32 x ndim   dims
        row-major float32 payload

Tensors are stored as float32 regardless of the in-memory float64
representation; loading converts back to float64, so a save/load round trip
is bitwise stable after the first f64 -> f32 rounding.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FVW1"
DTYPE_F32 = 0


class WeightFormatError(Exception):
    """Base error for malformed FVW1 files."""


class BadMagicError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class DuplicateNameError(WeightFormatError):
    pass


def save_weights(tensors: dict[str, np.ndarray], path) -> None:
    """Write named arrays to `path` in FVW1 layout (float32 payloads)."""
    names = list(tensors.keys())
    if len(set(names)) != len(names):
        raise DuplicateNameError("duplicate tensor name in save set")
    chunks = [MAGIC, struct.pack("<I", len(names))]
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise WeightFormatError(f"tensor name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> dict[str, np.ndarray]:
    """Read an FVW1 file back into float64 arrays keyed by name."""
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise TruncatedFileError(f"{path}: file shorter than header")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            if len(buf) < off + nlen:
                raise struct.error("name out of bounds")
            off += nlen
            dtype, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
        except struct.error as exc:
            raise TruncatedFileError(f"{path}: truncated tensor header") from exc
        if dtype != DTYPE_F32:
            raise WeightFormatError(f"{path}: unsupported dtype code {dtype} for {name!r}")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if dims else 4
        if ndim == 0:
            nbytes = 4
        payload = buf[off : off + nbytes]
        if len(payload) != nbytes:
            raise TruncatedFileError(f"{path}: truncated payload for tensor {name!r}")
        off += nbytes
        if name in out:
            raise DuplicateNameError(f"{path}: duplicate tensor name {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
        out[name] = arr
    return out
