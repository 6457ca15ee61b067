"""Versioned binary parameter container.

Layout (all integers little-endian):
    magic            4 bytes  b"INAS"
    format version   u16      currently 1
    parameter count  u32
    per parameter:
        name length  u16
        name         UTF-8 bytes
        rank         u8
        dims         u32 each
        values       float64 little-endian, row-major

Values are always stored as float64 so the round-trip is bit-exact in
both precision modes (every float32 is exactly representable).
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"INAS"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 10
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            nbytes = 8 * int(np.prod(dims, dtype=np.int64)) if rank else 8
            arr = np.frombuffer(data[off:off + nbytes], dtype="<f8").reshape(dims)
            if arr.size != int(np.prod(dims, dtype=np.int64)):
                raise CheckpointError(f"{path}: truncated payload for parameter {name!r}")
            off += nbytes
            out[name] = arr.copy()
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated container at byte {off}") from exc
    return out
