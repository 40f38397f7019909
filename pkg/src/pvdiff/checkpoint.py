"""Binary parameter checkpoints.

Layout (little-endian): magic "FPVW", format version u32, tensor count u32,
then per tensor: name length u16, UTF-8 name, rank u8, dims u32 each, raw
float32 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FPVW"
VERSION = 1


class CheckpointError(ValueError):
    """Raised on malformed or truncated checkpoint files."""


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float arrays; iteration is name-sorted for determinism."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:32]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor rank {arr.ndim} exceeds format limit")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a parameter checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_elem = 1
        for d in dims:
            n_elem *= d
        if n_elem * 4 > len(raw) - pos:
            raise CheckpointError(f"tensor {name!r} overflows the file")
        data = np.frombuffer(take(4 * n_elem), dtype="<f4").reshape(dims).copy()
        out[name] = data
    return out
