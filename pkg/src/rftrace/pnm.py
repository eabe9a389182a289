"""Minimal binary PGM (P5) / PPM (P6) reader and writer.

Masks are 8-bit PGMs with 0 = background and 255 = instance; images are
8-bit PPMs normalized to [0, 1] on read.  Zero-dependency formats keep the
artifact self-contained.
"""

from __future__ import annotations

import numpy as np

from .errors import RFTraceError
from .tensor import Tensor


class PnmError(RFTraceError):
    pass


def _read_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise PnmError(f"expected {magic.decode()} file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PnmError("truncated header")
        fields.append(int(data[start:pos]))
    return fields[0], fields[1], fields[2], pos + 1  # width, height, maxval, data offset


def read_pgm(path) -> np.ndarray:
    """8-bit grayscale image as a (H, W) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, maxval, offset = _read_header(data, b"P5")
    if maxval != 255:
        raise PnmError(f"only maxval 255 supported, got {maxval}")
    if len(data) - offset < width * height:
        raise PnmError("truncated pixel data")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=offset)
    return pixels.reshape(height, width).copy()


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise PnmError("pgm image must be 2-d")
    image = image.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(image.tobytes())


def read_mask(path) -> np.ndarray:
    """Binary mask: nonzero pixels are instance."""
    return read_pgm(path) > 0


def write_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_ppm(path) -> Tensor:
    """8-bit RGB image as a 3 x H x W float tensor in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, maxval, offset = _read_header(data, b"P6")
    if maxval != 255:
        raise PnmError(f"only maxval 255 supported, got {maxval}")
    if len(data) - offset < width * height * 3:
        raise PnmError("truncated pixel data")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=offset)
    hwc = pixels.reshape(height, width, 3).astype(np.float32) / 255.0
    return Tensor(np.ascontiguousarray(hwc.transpose(2, 0, 1)))


def write_ppm(path, image: Tensor) -> None:
    if image.channels != 3:
        raise PnmError(f"ppm image must have 3 channels, got {image.channels}")
    hwc = np.clip(image.data, 0.0, 1.0).transpose(1, 2, 0)
    bytes8 = np.round(hwc * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.width} {image.height}\n255\n".encode())
        fh.write(bytes8.tobytes())
