"""Binary PGM (P5) and PPM (P6) readers/writers.

All pixel payloads are 8-bit with maxval 255; grayscale planes travel as
float arrays in [0, 1], RGB as uint8 (H, W, 3).
"""

from __future__ import annotations

import numpy as np


class ImageFormatError(ValueError):
    """Malformed or unsupported netpbm content."""


def _read_tokens(data: bytes, count: int):
    """Read `count` whitespace/comment-separated header tokens.

    Returns the tokens and the offset one byte past the final separator,
    which is where the binary payload starts.
    """
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ImageFormatError("truncated netpbm header")
        c = data[i:i + 1]
        if c == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i + 1  # single whitespace byte after maxval


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a float32 (H, W) array scaled to [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _read_tokens(data, 4)
    if tokens[0] != b"P5":
        raise ImageFormatError(f"expected P5 magic, got {tokens[0]!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 supported, got {maxval}")
    payload = data[offset:offset + width * height]
    if len(payload) != width * height:
        raise ImageFormatError("truncated PGM payload")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return img.astype(np.float32) / 255.0


def write_pgm(path, plane: np.ndarray):
    """Write a float [0, 1] or uint8 (H, W) plane as binary PGM."""
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise ImageFormatError(f"PGM plane must be 2-D, got {plane.shape}")
    if plane.dtype != np.uint8:
        plane = np.clip(np.rint(plane * 255.0), 0, 255).astype(np.uint8)
    h, w = plane.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(plane.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a uint8 (H, W, 3) array."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _read_tokens(data, 4)
    if tokens[0] != b"P6":
        raise ImageFormatError(f"expected P6 magic, got {tokens[0]!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 supported, got {maxval}")
    payload = data[offset:offset + 3 * width * height]
    if len(payload) != 3 * width * height:
        raise ImageFormatError("truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, rgb: np.ndarray):
    """Write a uint8 (H, W, 3) array as binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ImageFormatError(f"PPM image must be (H, W, 3), got {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
