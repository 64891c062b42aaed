"""Raster image container and 8-bit image I/O (PNG, binary PGM/PPM).

PGM (P5) is the bit-exact golden-file format used by the tests; PNG support
covers ordinary captured frames. All pixel data is kept as uint8, grayscale
``(h, w)`` or RGB ``(h, w, 3)``, row-major.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import UnreadableImage, UnsupportedChannelCount
from .storage import atomic_write_bytes


@dataclass
class RasterImage:
    """2-D intensity grid, 1 (gray) or 3 (RGB) channels, uint8."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValueError("pixel values must lie in [0, 255]")
            if np.issubdtype(arr.dtype, np.floating) and not np.all(arr == np.rint(arr)):
                raise ValueError("float pixel data must hold integral values; round first")
            arr = arr.astype(np.uint8)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
            raise UnsupportedChannelCount(f"expected (h, w) or (h, w, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3


def _parse_pnm(buf: bytes) -> np.ndarray:
    """Decode binary PGM (P5) or PPM (P6)."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise UnreadableImage(f"not a binary PGM/PPM file (magic {magic!r})")
    # Header tokens: width, height, maxval; '#' comments run to end of line.
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise UnreadableImage("truncated PNM header")
        try:
            fields.append(int(buf[start:pos]))
        except ValueError as exc:
            raise UnreadableImage("malformed PNM header") from exc
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if width < 1 or height < 1 or not (0 < maxval <= 255):
        raise UnreadableImage(f"unsupported PNM geometry {width}x{height} maxval={maxval}")
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    raw = np.frombuffer(buf, dtype=np.uint8, count=count, offset=pos) if len(buf) - pos >= count else None
    if raw is None:
        raise UnreadableImage("PNM pixel data is truncated")
    arr = raw.reshape((height, width) if channels == 1 else (height, width, 3))
    return arr.copy()


def encode_pnm(image: RasterImage) -> bytes:
    """Encode to binary P5 (gray) or P6 (RGB)."""
    magic = b"P5" if image.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, image.width, image.height)
    return header + image.data.tobytes()


def read_image(path: str | Path) -> RasterImage:
    """Read a PNG or binary PGM/PPM file."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise UnreadableImage(f"cannot read {path}: {exc}") from exc
    if buf[:2] in (b"P5", b"P6"):
        return RasterImage(_parse_pnm(buf))
    try:
        with Image.open(io.BytesIO(buf)) as img:
            if img.mode == "L":
                arr = np.asarray(img, dtype=np.uint8)
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise UnreadableImage(f"cannot decode {path}: {exc}") from exc
    return RasterImage(arr)


def write_image(image: RasterImage, path: str | Path) -> None:
    """Write PNG / PGM / PPM according to the file extension (atomic)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm"):
        if suffix == ".pgm" and image.channels != 1:
            raise UnsupportedChannelCount("PGM stores grayscale only")
        if suffix == ".ppm" and image.channels != 3:
            raise UnsupportedChannelCount("PPM stores RGB only")
        atomic_write_bytes(path, encode_pnm(image))
    elif suffix == ".png":
        mode = "L" if image.channels == 1 else "RGB"
        out = io.BytesIO()
        Image.fromarray(image.data, mode=mode).save(out, format="PNG")
        atomic_write_bytes(path, out.getvalue())
    else:
        raise ValueError(f"unsupported image extension {suffix!r} (use .png, .pgm or .ppm)")
