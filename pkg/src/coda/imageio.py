"""Binary PPM (P6) image and PGM (P5) label map encoding/decoding.

Images are float RGB in [0,1] stored channel-last on disk at maxval 255;
label maps are uint8 class ids. Float pixels produced by the generator sit on
the k/255 grid, so a write/read round trip is bit-exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PnmError(ValueError):
    pass


def float_to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def u8_to_float(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / 255.0).astype(np.float32)


def snap_to_grid(img: np.ndarray) -> np.ndarray:
    """Quantize floats to the representable 8-bit grid (round trip exactness)."""
    return u8_to_float(float_to_u8(img))


def write_ppm(path, img: np.ndarray) -> None:
    """img: H x W x 3 floats in [0,1]."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise PnmError(f"write_ppm expects HxWx3, got {img.shape}")
    h, w = img.shape[:2]
    raw = float_to_u8(img)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(raw.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, w, h, maxval, offset = _parse_header(data, path)
    if magic != b"P6":
        raise PnmError(f"{path}: expected P6, got {magic.decode(errors='replace')}")
    if maxval != 255:
        raise PnmError(f"{path}: unsupported maxval {maxval}")
    n = w * h * 3
    body = data[offset : offset + n]
    if len(body) != n:
        raise PnmError(f"{path}: truncated pixel data")
    return u8_to_float(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3))


def write_pgm(path, labels: np.ndarray) -> None:
    """labels: H x W small integer class ids."""
    if labels.ndim != 2:
        raise PnmError(f"write_pgm expects HxW, got {labels.shape}")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(labels.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, w, h, maxval, offset = _parse_header(data, path)
    if magic != b"P5":
        raise PnmError(f"{path}: expected P5, got {magic.decode(errors='replace')}")
    if maxval != 255:
        raise PnmError(f"{path}: unsupported maxval {maxval}")
    n = w * h
    body = data[offset : offset + n]
    if len(body) != n:
        raise PnmError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def _parse_header(data: bytes, path) -> tuple[bytes, int, int, int, int]:
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        if i >= len(data):
            raise PnmError(f"{path}: truncated header")
        ch = data[i : i + 1]
        if ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            fields.append(data[i:j])
            i = j
    i += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as e:
        raise PnmError(f"{path}: bad header field: {e}") from None
    return fields[0], w, h, maxval, i
