"""Binary PPM (P6) / PGM (P5) read-write and the label colour palette."""

from __future__ import annotations

import os
import re

import numpy as np

MAX_DIM = 1 << 16

_HEADER = re.compile(rb"^(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def _write(path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    # header comments are not supported; only files written here are expected
    m = _HEADER.match(raw)
    if m is None or m.group(1) != magic:
        raise ValueError(f"{path}: malformed {magic.decode()} header")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    if not (0 < w <= MAX_DIM and 0 < h <= MAX_DIM):
        raise ValueError(f"{path}: dimensions {w}x{h} out of range")
    body = raw[m.end():]
    need = w * h * channels
    if len(body) < need:
        raise ValueError(f"{path}: truncated pixel data ({len(body)} of {need} bytes)")
    arr = np.frombuffer(body[:need], dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) array, got {rgb.shape}")
    _check_u8(rgb)
    _write(path, b"P6", rgb)


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6", 3)


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs an (H, W) array, got {gray.shape}")
    _check_u8(gray)
    _write(path, b"P5", gray)


def read_pgm(path) -> np.ndarray:
    return _read(path, b"P5", 1)


def _check_u8(arr: np.ndarray) -> None:
    if max(arr.shape[:2]) > MAX_DIM:
        raise ValueError(f"image dimensions {arr.shape[:2]} exceed {MAX_DIM}")
    if arr.dtype != np.uint8 and arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("pixel values must lie in 0..255")


def image_to_u8(chw: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    return np.clip(np.rint(np.asarray(chw) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def u8_to_image(hwc: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (np.asarray(hwc, dtype=dtype) / dtype(255.0)).transpose(2, 0, 1)


def make_palette(n: int = 256) -> np.ndarray:
    """Distinct colours per class by spreading the index bits over R, G, B.

    Bit 3j of the index lands in bit 7-j of R, bit 3j+1 in G and 3j+2 in B,
    so class 0 is black and the first few classes are well separated.
    """
    pal = np.zeros((n, 3), dtype=np.uint8)
    for idx in range(n):
        c = idx
        r = g = b = 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal[idx] = (r, g, b)
    return pal


PALETTE = make_palette()


def colorize_labels(labels: np.ndarray, palette: np.ndarray = PALETTE) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= len(palette)):
        raise ValueError("label outside palette range")
    return palette[labels]


def decolorize(rgb: np.ndarray, palette: np.ndarray = PALETTE) -> np.ndarray:
    keys = palette.astype(np.int64) @ np.array([1 << 16, 1 << 8, 1])
    lut = {int(k): i for i, k in enumerate(keys)}
    flat = np.asarray(rgb, dtype=np.int64).reshape(-1, 3) @ np.array([1 << 16, 1 << 8, 1])
    try:
        out = np.array([lut[int(v)] for v in flat], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"colour {e} is not in the palette") from None
    return out.reshape(np.asarray(rgb).shape[:2])


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
