"""GPAV tensor framing: the checkpoint format and the asset blob format.

Layout (little-endian)::

    b"GPAV"  u32 version  u32 count
    repeated count times:
        u16 name_len  utf-8 name  u8 rank  u64[rank] extents  f64[prod] values
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GPAV"
VERSION = 1


class TensorFormatError(ValueError):
    """Malformed tensor blob; the message names the byte offset."""


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes, base_offset: int = 0) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TensorFormatError(
                f"truncated data at byte offset {base_offset + pos}: need {n} bytes for {what}, "
                f"{len(blob) - pos} available")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise TensorFormatError(f"bad magic at byte offset {base_offset}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version} at byte offset {base_offset + 4}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name_at = pos
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise TensorFormatError(f"invalid utf-8 name at byte offset {base_offset + name_at}") from None
        (rank,) = struct.unpack("<B", take(1, f"rank of {name!r}"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, f"extents of {name!r}"))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(8 * n, f"values of {name!r}"), dtype="<f8")
        if name in out:
            raise TensorFormatError(f"duplicate tensor {name!r} at byte offset {base_offset + name_at}")
        out[name] = values.reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise TensorFormatError(f"{len(blob) - pos} trailing bytes at byte offset {base_offset + pos}")
    return out


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]):
    atomic_write_bytes(path, encode_tensors(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())
