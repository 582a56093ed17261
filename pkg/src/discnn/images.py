"""Binary PPM/PGM image files: dependency-free and byte-deterministic."""

from __future__ import annotations

import numpy as np

__all__ = ["write_ppm", "read_ppm", "write_pgm", "float_chw_to_u8", "u8_to_float_chw"]


def write_ppm(path, pixels: np.ndarray) -> None:
    """8-bit color image, pixels [H, W, 3] uint8, P6 format."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"write_ppm wants [H, W, 3] uint8, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit P6 pixmap")
    w, h = int(fields[1]), int(fields[2])
    pos += 1  # single whitespace after maxval
    raster = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return raster.reshape(h, w, 3).copy()


def write_pgm(path, pixels: np.ndarray) -> None:
    """8-bit grayscale image, pixels [H, W] uint8, P5 format."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError(f"write_pgm wants [H, W] uint8, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def float_chw_to_u8(image: np.ndarray) -> np.ndarray:
    """[3, H, W] floats in [0, 1] to [H, W, 3] uint8."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def u8_to_float_chw(pixels: np.ndarray) -> np.ndarray:
    """[H, W, 3] uint8 to [3, H, W] float32 in [0, 1]."""
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)
