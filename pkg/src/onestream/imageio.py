"""Binary PPM (P6) / PGM (P5) reading and writing, plus box text files."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        out.append(buf[start:pos])
    return out, pos + 1  # exactly one whitespace byte before the raster


def read_pnm(path) -> np.ndarray:
    """Return H×W×3 (P6) or H×W (P5) uint8."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    if magic == b"P6":
        shape = (h, w, 3)
    elif magic == b"P5":
        shape = (h, w)
    else:
        raise ValueError(f"{path}: not a binary PPM/PGM file")
    n = int(np.prod(shape))
    raster = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos)
    return raster.reshape(shape).copy()


def write_pnm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + img.tobytes())


def read_boxes(path) -> np.ndarray:
    """Read one ``x y w h`` box per line (commas or whitespace)."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        vals = [float(v) for v in line.replace(",", " ").split()]
        if len(vals) != 4:
            raise ValueError(f"{path}: expected 4 numbers per line, got {line!r}")
        rows.append(vals)
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def write_boxes(path, boxes) -> None:
    lines = [" ".join(f"{v:.2f}" for v in row) for row in np.asarray(boxes).reshape(-1, 4)]
    Path(path).write_text("\n".join(lines) + "\n")
