"""Binary PPM (P6) and PGM (P5) reading and writing.

Header is exactly ``magic\\nwidth height\\n255\\n`` followed by raw
bytes, so identical pixel data always produces identical files.  Values
are quantized with half-up rounding.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .numerics import require


def quantize(values: np.ndarray) -> np.ndarray:
    """Half-up rounding to 0..255 bytes."""
    v = np.floor(np.asarray(values, dtype=np.float64) + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def write_pgm(path: Path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    require(gray.ndim == 2, f"PGM frame must be (h, w), got {gray.shape}")
    data = gray if gray.dtype == np.uint8 else quantize(gray)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def write_ppm(path: Path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    require(rgb.ndim == 3 and rgb.shape[0] == 3,
            f"PPM frame must be (3, h, w), got {rgb.shape}")
    data = rgb if rgb.dtype == np.uint8 else quantize(rgb)
    _, h, w = data.shape
    # interleave channels: P6 stores RGB per pixel
    body = data.transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + body)


def _read_netpbm(path: Path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != magic:
        raise ContractViolation(f"{path}: not a {magic.decode()} file")
    try:
        w, h = (int(x) for x in parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise ContractViolation(f"{path}: malformed header") from None
    if maxval != 255:
        raise ContractViolation(f"{path}: unsupported maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = w * h * channels
    body = parts[3]
    if len(body) != expected:
        raise ContractViolation(
            f"{path}: payload is {len(body)} bytes, expected {expected}")
    flat = np.frombuffer(body, dtype=np.uint8)
    if channels == 1:
        return flat.reshape(h, w).copy()
    return flat.reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_pgm(path: Path) -> np.ndarray:
    """Read a P5 file back to (h, w) uint8."""
    return _read_netpbm(path, b"P5")


def read_ppm(path: Path) -> np.ndarray:
    """Read a P6 file back to (3, h, w) uint8."""
    return _read_netpbm(path, b"P6")
