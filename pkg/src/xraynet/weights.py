"""SNWT binary weight files.

Layout (little-endian)::

    b"SNWT" | u32 version (=1) | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u32 rank | u32 dims[rank] | f32 payload
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ChecksumMismatch, FormatError

MAGIC = b"SNWT"
VERSION = 1


def encode_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_weights(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated weights file: needed {n} bytes at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic; not an SNWT weights file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported SNWT version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8") from exc
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * n)
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if len(view) - pos != 4:
        raise FormatError(f"expected 4 trailing checksum bytes, found {len(view) - pos}")
    (stored,) = struct.unpack("<I", take(4))
    if zlib.crc32(view[: pos - 4]) & 0xFFFFFFFF != stored:
        raise ChecksumMismatch("CRC32 does not match file contents")
    return out


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_weights(model_or_tensors, path) -> None:
    """Save a model's state (parameters and batch-norm statistics) or a name->array map."""
    tensors = model_or_tensors.state_dict() if hasattr(model_or_tensors, "state_dict") else model_or_tensors
    atomic_write_bytes(path, encode_weights(tensors))


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_weights(fh.read())
