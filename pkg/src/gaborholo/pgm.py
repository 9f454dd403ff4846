"""Binary greyscale PGM (P5) reading and 16-bit writing."""

from __future__ import annotations

import os

import numpy as np


class PGMError(ValueError):
    pass


def quantize16(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint16 codes, round-half-up."""
    image = np.asarray(image, dtype=np.float64)
    if np.any(image < 0) or np.any(image > 1) or not np.all(np.isfinite(image)):
        raise PGMError("pixel values must lie in [0, 1] before quantization")
    return np.floor(image * 65535.0 + 0.5).astype(np.uint16)


def write_pgm16(path: str | os.PathLike, image: np.ndarray) -> None:
    codes = quantize16(image)
    h, w = codes.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n65535\n" % (w, h))
        fh.write(codes.astype(">u2").tobytes())


def _tokens(data: bytes):
    """Yield (token, end_offset) for the four header fields, skipping comments."""
    pos = 0
    found = 0
    while found < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise PGMError("truncated PGM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        found += 1
        yield data[start:pos], pos


def read_pgm_raw(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Return (integer pixel array, maxval) for an 8- or 16-bit P5 file."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = list(_tokens(data))
    if fields[0][0] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (magic {fields[0][0]!r})")
    try:
        width, height, maxval = (int(tok) for tok, _ in fields[1:])
    except ValueError as exc:
        raise PGMError(f"{path}: malformed header") from exc
    if not (0 < maxval < 65536) or width <= 0 or height <= 0:
        raise PGMError(f"{path}: bad dimensions or maxval")
    start = fields[-1][1] + 1  # exactly one whitespace byte after maxval
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    count = width * height
    body = data[start : start + count * dtype.itemsize]
    if len(body) != count * dtype.itemsize:
        raise PGMError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(body, dtype=dtype).reshape(height, width)
    return pixels.astype(np.uint16), maxval


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a PGM scaled to [0, 1] as float64 (8-bit input is upconverted)."""
    pixels, maxval = read_pgm_raw(path)
    return pixels.astype(np.float64) / maxval
