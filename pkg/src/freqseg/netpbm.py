"""Binary netpbm (P5 / P6, 8-bit) reading and writing."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .tensor import FormatError, Tensor

LUMA = (0.299, 0.587, 0.114)


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"truncated header at offset {start}")
    return buf[start:pos], pos


def decode(buf: bytes) -> np.ndarray:
    """Decode to uint8 (H, W) for P5 or (H, W, 3) for P6."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r} at offset 0")
    pos = 2
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"bad header field {tok!r} at offset {start}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"maxval {maxval} unsupported (need 255) at offset {pos}")
    if width < 1 or height < 1:
        raise FormatError(f"empty image {width}x{height} at offset {pos}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"missing separator before raster at offset {pos}")
    pos += 1
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    if len(buf) - pos < need:
        raise FormatError(f"truncated raster: need {need} bytes at offset {pos}, have {len(buf) - pos}")
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return raster.reshape(shape)


def load_image_gray(path) -> Tensor:
    """Read a P5/P6 file as an (H, W) grayscale tensor in [0, 1] (BT.601 luma for P6)."""
    pix = decode(Path(path).read_bytes()).astype(np.float64)
    if pix.ndim == 3:
        pix = pix @ np.array(LUMA)
    return Tensor(pix / 255.0)


def encode(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def save_image(path, pixels: np.ndarray) -> None:
    """Write uint8 data, or floats in [0, 1], as P5 (H, W) or P6 (H, W, 3)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(pixels))
    os.replace(tmp, path)
