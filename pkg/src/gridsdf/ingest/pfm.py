"""Portable float map (PFM) and 8-bit PNG image I/O."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np


class PFMError(ValueError):
    pass


def save_pfm(path, data) -> None:
    """Write float32 little-endian PFM, rows bottom-to-top."""
    arr = np.asarray(data)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"PF"
    elif arr.ndim == 2:
        magic = b"Pf"
    else:
        raise PFMError(f"PFM holds HxW or HxWx3 maps, got shape {arr.shape}")
    h, w = arr.shape[:2]
    payload = np.ascontiguousarray(np.flipud(arr).astype("<f4")).tobytes()
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n" + payload)


def load_pfm(path) -> np.ndarray:
    """Read a PFM into float32 (H, W) or (H, W, 3), rows top-to-bottom."""
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\S+)\s+(\S+)\s+(\S+)\s", raw)
    if m is None:
        raise PFMError("bad PFM magic or header")
    magic = m.group(1)
    try:
        w, h = int(m.group(2)), int(m.group(3))
        scale = float(m.group(4))
    except ValueError:
        raise PFMError("non-numeric PFM dimensions or scale") from None
    if w <= 0 or h <= 0 or not np.isfinite(scale) or scale == 0:
        raise PFMError(f"invalid PFM dimensions {w}x{h} or scale {scale}")
    channels = 3 if magic == b"PF" else 1
    count = w * h * channels
    body = raw[m.end():]
    if len(body) < 4 * count:
        raise PFMError(f"truncated PFM payload: {len(body)} bytes, expected {4 * count}")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(body[:4 * count], dtype=dtype).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(arr.reshape(shape)).copy()


def save_png(path, image) -> None:
    """Save an (H, W, 3) [0, 1] image as 8-bit RGB, or (H, W) as 8-bit gray."""
    from PIL import Image

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L",) else im)
    return arr.astype(np.float64) / 255.0
