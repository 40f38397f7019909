"""Episode dataset files.

Layout (little-endian): magic "FPVD", version u32, episode count u32; per
episode: variant u8, instruction_id u32, step count u32; per step:
N u32 then N x 3 f32 points; C, H, W u32 then C*H*W f32 pixels;
H_chunk, A u32 then H_chunk*A f32 actions.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .env import CODE_VARIANTS, VARIANT_CODES, Episode, Observation

MAGIC = b"FPVD"
VERSION = 1
_MAX_DIM = 1 << 24  # sanity bound on serialized sizes


class DatasetError(ValueError):
    """Raised on malformed or truncated dataset files."""


def write_dataset(episodes: list[Episode], path) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(episodes))
    for ep in episodes:
        steps = len(ep.observations)
        if steps != len(ep.chunks):
            raise DatasetError("episode has mismatched observation/chunk counts")
        buf += struct.pack("<BII", VARIANT_CODES[ep.variant], ep.instruction_id, steps)
        for obs, chunk in zip(ep.observations, ep.chunks):
            pts = np.ascontiguousarray(obs.points, dtype=np.float32)
            if pts.ndim != 2 or pts.shape[1] != 3:
                raise DatasetError(f"points must be (N, 3), got {pts.shape}")
            buf += struct.pack("<I", pts.shape[0])
            buf += pts.tobytes()
            img = np.ascontiguousarray(obs.image, dtype=np.float32)
            if img.ndim != 3:
                raise DatasetError(f"image must be (C, H, W), got {img.shape}")
            buf += struct.pack("<III", *img.shape)
            buf += img.tobytes()
            c = np.ascontiguousarray(chunk, dtype=np.float32)
            if c.ndim != 2:
                raise DatasetError(f"chunk must be (H, A), got {c.shape}")
            buf += struct.pack("<II", *c.shape)
            buf += c.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_dataset(path) -> list[Episode]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise DatasetError(f"truncated dataset: needed {n} bytes at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    def dims(*values) -> tuple[int, ...]:
        for v in values:
            if v > _MAX_DIM:
                raise DatasetError(f"dimension {v} exceeds the format bound")
        return values

    if bytes(take(4)) != MAGIC:
        raise DatasetError("not an episode dataset (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    episodes: list[Episode] = []
    for _ in range(count):
        code, instr, steps = struct.unpack("<BII", take(9))
        if code not in CODE_VARIANTS:
            raise DatasetError(f"unknown task variant code {code}")
        variant = CODE_VARIANTS[code]
        observations = []
        chunks = []
        for _ in range(steps):
            (n_pts,) = dims(*struct.unpack("<I", take(4)))
            pts = np.frombuffer(take(12 * n_pts), dtype="<f4").reshape(n_pts, 3).copy()
            c, h, w = dims(*struct.unpack("<III", take(12)))
            img = np.frombuffer(take(4 * c * h * w), dtype="<f4").reshape(c, h, w).copy()
            hc, a = dims(*struct.unpack("<II", take(8)))
            chunk = np.frombuffer(take(4 * hc * a), dtype="<f4").reshape(hc, a).copy()
            observations.append(Observation(instruction_id=instr, image=img, points=pts))
            chunks.append(chunk)
        stacked = (np.asarray(chunks, dtype=np.float64) if chunks
                   else np.zeros((0, 0, 0)))
        episodes.append(Episode(
            variant=variant,
            instruction_id=instr,
            observations=observations,
            chunks=stacked,
        ))
    return episodes
