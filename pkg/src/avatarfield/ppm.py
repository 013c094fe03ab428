"""Binary PPM (P6, maxval 255) images.

Quantisation is ``floor(255 * v + 0.5)`` after clipping to [0, 1], i.e.
round-half-up, so 0.5 maps to byte 128.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .tensorio import atomic_write_bytes


class PpmError(ValueError):
    pass


def quantize(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if not np.isfinite(img).all():
        raise PpmError("image contains non-finite values")
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise PpmError(f"expected an (H, W, 3) image, got shape {img.shape}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + quantize(img).tobytes()


def write_ppm(image: np.ndarray, path):
    atomic_write_bytes(path, encode_ppm(image))


def _tokens(raw: bytes, count: int):
    """First ``count`` whitespace-separated header tokens (comments skipped) and the data offset."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PpmError(f"truncated header at byte offset {pos}")
        out.append(raw[start:pos])
    return out, pos + 1


def decode_ppm(raw: bytes) -> np.ndarray:
    (magic, w, h, maxval), offset = _tokens(raw, 4)
    if magic != b"P6":
        raise PpmError(f"not a binary PPM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise PpmError(f"only maxval 255 is supported, got {maxval}")
    body = raw[offset:offset + w * h * 3]
    if len(body) != w * h * 3:
        raise PpmError(f"pixel data truncated at byte offset {offset + len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())
