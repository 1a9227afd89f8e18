"""Named-tensor archive.

Layout, all integers unsigned 32-bit little-endian::

    b"CRLD" | version | tensor count |
    per tensor: name length | UTF-8 name | rank | dims... | float32 LE data
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"CRLD"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, truncated body, or trailing bytes."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    """A tensor is missing or its shape disagrees with the model configuration."""


def encode_tensors(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(raw: bytes, source="<bytes>") -> dict:
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {raw[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointFormatError(f"{source}: truncated at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{source}: format version {version}, expected {FORMAT_VERSION}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{source}: tensor name is not UTF-8") from exc
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(raw):
        raise CheckpointFormatError(f"{source}: {len(raw) - pos} trailing bytes")
    return out


def write_tensors(path, tensors: dict):
    """Atomically write ``tensors`` (name -> array) to ``path``."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_tensors(tensors))
    os.replace(tmp, path)


def read_tensors(path) -> dict:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read(), str(path))
