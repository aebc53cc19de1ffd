"""Binary PPM (P6) and PGM (P5) codecs with maxval 255."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def encode_ppm(image) -> bytes:
    """Encode an ``H x W x 3`` uint8 array as P6."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise NetpbmError(f"PPM needs H x W x 3 data, got {arr.shape}")
    return _encode(b"P6", arr)


def encode_pgm(mask) -> bytes:
    """Encode an ``H x W`` array of values in 0..255 as P5."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise NetpbmError(f"PGM needs H x W data, got {arr.shape}")
    return _encode(b"P5", arr)


def _encode(magic, arr):
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise NetpbmError("values outside 0..255")
    if np.issubdtype(arr.dtype, np.floating) and not np.array_equal(arr, np.round(arr)):
        raise NetpbmError("non-integral values; quantize before encoding")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + arr.astype(np.uint8).tobytes()


def _tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header fields, skipping ``#`` comments."""
    fields = []
    pos = 0
    n = len(data)
    while len(fields) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        fields.append(data[start:pos])
    if pos >= n or not data[pos:pos + 1].isspace():
        raise NetpbmError("header not terminated by whitespace")
    return fields, pos + 1


def _decode(data: bytes, magic: bytes, channels: int):
    fields, offset = _tokens(data, 4)
    if fields[0] != magic:
        raise NetpbmError(f"expected magic {magic.decode()}, got {fields[0][:8]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise NetpbmError(f"non-numeric header fields {fields[1:]}") from None
    if w <= 0 or h <= 0:
        raise NetpbmError(f"bad dimensions {w}x{h}")
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, got {maxval}")
    need = w * h * channels
    payload = data[offset:offset + need]
    if len(payload) != need:
        raise NetpbmError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels == 3 else (h, w)).copy()


def decode_ppm(data: bytes) -> np.ndarray:
    return _decode(data, b"P6", 3)


def decode_pgm(data: bytes) -> np.ndarray:
    return _decode(data, b"P5", 1)


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_ppm(path, image):
    Path(path).write_bytes(encode_ppm(image))


def write_pgm(path, mask):
    Path(path).write_bytes(encode_pgm(mask))


def quantize(image) -> np.ndarray:
    """Map ``[0, 1]`` floats to uint8 by rounding."""
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def dequantize(image) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0
