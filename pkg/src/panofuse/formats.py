"""Raster codecs: 8-bit PNG for colour images and masks, PFM for float depth."""
from __future__ import annotations

import io
import re

import numpy as np
from PIL import Image


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def image_to_png(image) -> bytes:
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def png_to_image(data: bytes) -> np.ndarray:
    im = Image.open(io.BytesIO(data)).convert("RGB")
    return np.asarray(im, dtype=np.float64) / 255.0


def mask_to_png(mask) -> bytes:
    arr = np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def png_to_mask(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)).convert("L")) >= 128


def depth_to_pfm(depth) -> bytes:
    """Single-channel little-endian PFM; rows stored bottom-up as the format requires.

    Undefined (NaN) depth is kept as NaN.
    """
    d = np.asarray(depth, dtype="<f4")
    H, W = d.shape
    header = f"Pf\n{W} {H}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(d[::-1]).tobytes()


_PFM_HEADER = re.compile(rb"(Pf|PF)\s+(\d+)\s+(\d+)\s+(\S+)\s")


def pfm_to_depth(data: bytes) -> np.ndarray:
    m = _PFM_HEADER.match(data)
    if not m:
        raise FormatError("bad PFM header", 0)
    if m.group(1) != b"Pf":
        raise FormatError("colour PFM not supported for depth", 0)
    W, H = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError:
        raise FormatError("bad PFM scale", m.start(4)) from None
    dtype = "<f4" if scale < 0 else ">f4"
    start = m.end()
    need = W * H * 4
    if len(data) - start < need:
        raise FormatError(f"PFM payload truncated: need {need} bytes", len(data))
    arr = np.frombuffer(data, dtype=dtype, count=W * H, offset=start).reshape(H, W)
    return arr[::-1].astype(np.float64)
