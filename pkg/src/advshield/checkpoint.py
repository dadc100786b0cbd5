"""Versioned binary checkpoints for the ASV and reformer models.

Layout (little-endian)::

    b"ASVC" | u32 version | u32 kind_len | kind (utf-8)
    | u32 meta_len | meta (utf-8 JSON) | u32 n_tensors
    | per tensor: u32 name_len | name | u32 ndim | u32 dims[ndim] | f32 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ASVC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode(kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(kind), _pack_str(json.dumps(meta, sort_keys=True))]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint at byte offset {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode(raw: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad checkpoint magic at byte offset 0")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = r.string()
    meta = json.loads(r.string())
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes at byte offset {r.pos}")
    return kind, meta, tensors


def save(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(kind, meta, tensors))


def load(path, expected_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    kind, meta, tensors = decode(Path(path).read_bytes())
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"expected a {expected_kind!r} checkpoint, found {kind!r}")
    return kind, meta, tensors
