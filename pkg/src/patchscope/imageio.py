"""Image container plus PPM/PGM (binary) and JPEG file I/O."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import HeaderMismatchError, MissingFileError, TruncatedFileError, UnsupportedFormatError


@dataclass
class Image:
    """8-bit raster, row-major ``[height, width, channels]``."""

    pixels: np.ndarray
    source_format: str = "raw"

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise HeaderMismatchError(f"image must be HxWx1 or HxWx3, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise HeaderMismatchError("image width and height must be >= 1")
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise HeaderMismatchError("samples must lie in [0, 255]")
            px = px.astype(np.uint8)
        self.pixels = np.ascontiguousarray(px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def to_rgb(self) -> "Image":
        if self.channels == 3:
            return self
        return Image(np.repeat(self.pixels, 3, axis=2), self.source_format)

    def to_float(self) -> np.ndarray:
        """``[C,H,W]`` float64 array scaled to [0, 1]."""
        return self.pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pnm_header(data: bytes) -> tuple[bytes, int, int, int, int]:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise TruncatedFileError("PNM header ends early")
        tokens.append(m.group(1))
        pos = m.end()
    if pos >= len(data):
        raise TruncatedFileError("PNM header not followed by pixel data")
    # exactly one whitespace byte separates maxval from the raster
    if data[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise HeaderMismatchError("PNM header must end with a single whitespace byte")
    pos += 1
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise HeaderMismatchError(f"non-numeric PNM header fields {tokens[1:]!r}") from None
    return magic, width, height, maxval, pos


def decode_pnm(data: bytes) -> Image:
    if data[:2] not in (b"P5", b"P6"):
        raise UnsupportedFormatError(f"not a binary PGM/PPM file (magic {data[:2]!r})")
    magic, width, height, maxval, pos = _parse_pnm_header(data)
    if width < 1 or height < 1:
        raise HeaderMismatchError(f"bad PNM dimensions {width}x{height}")
    if not 1 <= maxval <= 255:
        raise UnsupportedFormatError(f"only 8-bit PNM is supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = data[pos:]
    if len(payload) < need:
        raise TruncatedFileError(f"PNM raster has {len(payload)} bytes, header promises {need}")
    if len(payload) > need:
        raise HeaderMismatchError(f"PNM raster has {len(payload) - need} bytes beyond the header's size")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    if maxval != 255:
        if px.max() > maxval:
            raise HeaderMismatchError("sample exceeds declared maxval")
        px = np.round(px.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return Image(px.copy(), "ppm" if channels == 3 else "pgm")


def encode_pnm(img: Image) -> bytes:
    magic = b"P6" if img.channels == 3 else b"P5"
    return magic + f"\n{img.width} {img.height}\n255\n".encode("ascii") + img.pixels.tobytes()


_EXT = {".ppm": "ppm", ".pgm": "pgm", ".pnm": "pnm", ".jpg": "jpeg", ".jpeg": "jpeg", ".jfif": "jpeg"}


def format_for(path: str | Path) -> str:
    ext = Path(path).suffix.lower()
    if ext not in _EXT:
        raise UnsupportedFormatError(f"unsupported image format {ext or '(none)'!r} for {path}")
    return _EXT[ext]


def read_image(path: str | Path) -> Image:
    fmt = format_for(path)
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise MissingFileError(f"no such image: {path}") from None
    if fmt == "jpeg":
        from .jpeg import jpeg_decode

        return jpeg_decode(data)
    img = decode_pnm(data)
    if fmt == "ppm" and img.channels != 3:
        raise HeaderMismatchError(f"{path}: .ppm file holds a greyscale (P5) raster")
    if fmt == "pgm" and img.channels != 1:
        raise HeaderMismatchError(f"{path}: .pgm file holds a colour (P6) raster")
    return img


def write_image(path: str | Path, img: Image, quality: int = 95) -> None:
    fmt = format_for(path)
    if fmt == "jpeg":
        from .jpeg import jpeg_encode

        Path(path).write_bytes(jpeg_encode(img, quality))
        return
    if fmt == "ppm":
        img = img.to_rgb()
    elif fmt == "pgm" and img.channels != 1:
        raise HeaderMismatchError("PGM output needs a single-channel image")
    Path(path).write_bytes(encode_pnm(img))


def psnr(a: Image | np.ndarray, b: Image | np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for 8-bit data; inf when identical."""
    xa = (a.pixels if isinstance(a, Image) else np.asarray(a)).astype(np.float64)
    xb = (b.pixels if isinstance(b, Image) else np.asarray(b)).astype(np.float64)
    if xa.shape != xb.shape:
        raise HeaderMismatchError(f"psnr: shapes differ {xa.shape} vs {xb.shape}")
    err = np.mean((xa - xb) ** 2)
    return float("inf") if err == 0 else float(10 * np.log10(255.0**2 / err))
