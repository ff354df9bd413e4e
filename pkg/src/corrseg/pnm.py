"""Minimal binary PGM (P5) / PPM (P6) writers and a reader for tests."""

from __future__ import annotations

import numpy as np


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM images are 2D")
    img = np.clip(image, 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM images are (H, W, 3)")
    img = np.clip(image, 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, _ = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    channels = {"P5": 1, "P6": 3}[magic]
    arr = np.frombuffer(blob, dtype=np.uint8, offset=pos, count=w * h * channels)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


def to_gray(values: np.ndarray) -> np.ndarray:
    """Min-max scale a 2D float array to 0..255."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round(255 * (v - lo) / (hi - lo)).astype(np.uint8)
