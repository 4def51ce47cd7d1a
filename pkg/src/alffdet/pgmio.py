"""Binary PGM (P5, 8-bit) reading and writing."""

from __future__ import annotations

import numpy as np


class PgmError(ValueError):
    pass


def write_pgm(path, values: np.ndarray) -> None:
    """Write a float array in [0, 1] as an 8-bit P5 PGM (values scaled x255)."""
    if values.ndim == 3 and values.shape[0] == 1:
        values = values[0]
    if values.ndim != 2:
        raise PgmError(f"expected 2-d grid, got shape {values.shape}")
    data = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 PGM back to floats in [0, 1], shape (h, w)."""
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise PgmError(f"{path}: not a binary P5 PGM")
    try:
        w, h = (int(t) for t in parts[1].split())
        maxval = int(parts[2])
    except ValueError as e:
        raise PgmError(f"{path}: malformed header") from e
    if maxval != 255:
        raise PgmError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(parts[3][: w * h], dtype=np.uint8)
    if data.size != w * h:
        raise PgmError(f"{path}: truncated pixel data")
    return data.reshape(h, w).astype(np.float64) / 255.0
