"""Image I/O: 8-bit PNG for previews, 32-bit float dumps for numeric oracles.

The float dump is a tiny private container: ``b"FIMG"`` magic, three little-endian
uint32 fields (width, height, channels), then row-major float32 data. PNGs go
through Pillow and quantize to 8 bits, so tests that compare pixel values should
use the float dump.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeMismatchError

_MAGIC = b"FIMG"


def _as_hwc(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeMismatchError(
            "image must be (H, W) or (H, W, C)", shape=list(np.shape(img))
        )
    return arr


def write_png(path: str | Path, img: np.ndarray) -> None:
    """Write a [0, 1] float image as an 8-bit PNG."""
    arr = _as_hwc(img)
    data = np.clip(arr, 0.0, 1.0)
    u8 = (data * 255.0 + 0.5).astype(np.uint8)
    if u8.shape[2] == 1:
        u8 = u8[:, :, 0]
    Image.fromarray(u8).save(str(path))


def read_png(path: str | Path) -> np.ndarray:
    """Read a PNG into a float array in [0, 1], shape (H, W, 3)."""
    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_float_image(path: str | Path, img: np.ndarray) -> None:
    """Write a float32 dump: FIMG magic, width/height/channels, row-major data."""
    arr = _as_hwc(img)
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", w, h, c))
        fh.write(arr.astype("<f4").tobytes())


def read_float_image(path: str | Path) -> np.ndarray:
    """Read a float32 dump written by :func:`write_float_image`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ShapeMismatchError("not a float image dump", path=str(path))
        w, h, c = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h * c:
        raise ShapeMismatchError(
            "float dump payload truncated", expected=w * h * c, actual=int(data.size)
        )
    return data.reshape(h, w, c).astype(np.float64)


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB between two images of equal shape."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatchError(
            "psnr operands differ in shape", a=list(x.shape), b=list(y.shape)
        )
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(data_range * data_range / mse)
