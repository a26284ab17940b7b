"""Raster output without an imaging dependency: 8-bit grayscale PNG
(stored uncompressed-friendly via zlib) and binary PGM as the fallback.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from gmvc.errors import InvalidInput


def _require_gray(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8 or img.size == 0:
        raise InvalidInput(
            f"need a non-empty 2-D uint8 array, got {img.dtype} {img.shape}"
        )
    return img


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    )


def png_bytes(image) -> bytes:
    img = _require_gray(image)
    h, w = img.shape
    raw = b"".join(b"\x00" + img[r].tobytes() for r in range(h))  # filter 0 rows
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)  # 8-bit grayscale
    return (
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", zlib.compress(raw, 9))
        + _png_chunk(b"IEND", b"")
    )


def pgm_bytes(image) -> bytes:
    img = _require_gray(image)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_image(path: str, image) -> None:
    """Format picked by extension: .png or .pgm."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        blob = png_bytes(image)
    elif ext == ".pgm":
        blob = pgm_bytes(image)
    else:
        raise InvalidInput(f"unsupported image extension {ext!r} (use .png or .pgm)")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def mel_to_image(frames) -> np.ndarray:
    """Normalized mel frames (T, bands) in [-1, 1] -> uint8 picture.

    Bands run vertically with the lowest band at the bottom, time left
    to right.
    """
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim != 2 or f.size == 0:
        raise InvalidInput(f"need (frames, bands), got shape {f.shape}")
    unit = np.clip((f + 1.0) * 0.5, 0.0, 1.0)
    return np.round(unit.T[::-1] * 255.0).astype(np.uint8)


def stack_rows(images, pad: int = 2, fill: int = 255) -> np.ndarray:
    """Vertical grid of equal-width images separated by `pad` rows."""
    imgs = [_require_gray(im) for im in images]
    if not imgs:
        raise InvalidInput("no images to stack")
    width = imgs[0].shape[1]
    if any(im.shape[1] != width for im in imgs):
        raise InvalidInput("stacked images must share a width")
    sep = np.full((pad, width), fill, dtype=np.uint8)
    parts = []
    for i, im in enumerate(imgs):
        if i:
            parts.append(sep)
        parts.append(im)
    return np.concatenate(parts, axis=0)
