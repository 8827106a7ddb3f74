"""Binary PPM (P6) and PGM (P5) read/write, 8-bit."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import CorpusError


def write_ppm(pixels: np.ndarray, path) -> None:
    """pixels: uint8 [H,W,3]."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise CorpusError(f"PPM wants [H,W,3] uint8, got {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_pgm(pixels: np.ndarray, path) -> None:
    """pixels: uint8 [H,W]."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise CorpusError(f"PGM wants [H,W] uint8, got {pixels.shape}")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _read_netpbm(path, magic: str, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace():
            i += 1
        fields.append(data[start:i])
    if fields[0].decode("ascii", "replace") != magic:
        raise CorpusError(f"{path}: expected {magic} header")
    w, h, maxval = (int(f) for f in fields[1:4])
    if maxval != 255:
        raise CorpusError(f"{path}: only maxval 255 supported")
    i += 1  # single whitespace after maxval
    raw = data[i:i + w * h * channels]
    if len(raw) != w * h * channels:
        raise CorpusError(f"{path}: truncated pixel payload")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, "P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, "P5", 1)
