"""Binary PPM/PGM reading and writing (8-bit only)."""

from __future__ import annotations

import numpy as np


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap [0,1] values to the 8-bit grid so PPM round trips are exact."""
    return to_uint8(image).astype(np.float64) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    data = to_uint8(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError("PPM needs an HxWx3 image")
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm(path, grid: np.ndarray) -> None:
    """Boolean or [0,1] grid; true/1 is written as 255."""
    grid = np.asarray(grid)
    data = np.where(grid, 255, 0).astype(np.uint8) if grid.dtype == bool else to_uint8(grid)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, got {tokens[0][:8]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed header") from None
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    n = w * h * channels
    body = raw[pos:pos + n]
    if len(body) != n:
        raise ValueError(f"{path}: expected {n} bytes of pixel data, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1) > 127
