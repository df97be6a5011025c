"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"CRTCKPT\\0"
    version    u32       FORMAT_VERSION
    meta_len   u32       length of the UTF-8 JSON metadata blob
    meta       bytes
    count      u32       number of tensors
    per tensor:
        name_len u16, name (UTF-8)
        ndim     u8,  dims u64 * ndim
        data     f64 * prod(dims), row-major
"""
from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"CRTCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    meta_blob = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_blob)), meta_blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is C order; keeps 0-d shapes
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {buf[:8]!r})")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    version, meta_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    meta = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return tensors, meta
