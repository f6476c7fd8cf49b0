"""Parameter checkpoint file ("QRB1").

Layout, all little-endian::

    b"QRB1"
    u32  block count
    per block:
        u32  name length in bytes, then the UTF-8 name
        u32  rank, then rank x u32 extents
        f32  payload, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"QRB1"


class CheckpointError(ValueError):
    pass


def dumps_checkpoint(blocks: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}, have {len(buf) - pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        blocks[name] = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last block")
    return blocks


def save_checkpoint(path, blocks: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_checkpoint(blocks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return loads_checkpoint(Path(path).read_bytes())
