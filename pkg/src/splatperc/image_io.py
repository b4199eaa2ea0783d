"""Image representation, file I/O, crop sampling, and pixel-space metrics.

Rasters are float64 in [0, 1], sRGB-encoded as stored in the file; no gamma
linearization happens anywhere in the package. PNG support is a deliberately
small subset (8/16-bit gray and RGB, no interlace, no palette) decoded with
the stdlib zlib, so the whole I/O path has no third-party dependency.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ShapeMismatchError,
    TruncatedPayloadError,
    UnreadableFileError,
    UnsupportedFormatError,
)
from .validation import as_image_array

DEFAULT_CROP_SIDE = 256

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class ImageBuffer:
    """H x W x C raster, float64 samples in [0, 1]. Immutable by convention."""

    data: np.ndarray  # (H, W, C)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, 1|3) data, got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def clamped(self) -> "ImageBuffer":
        return ImageBuffer(np.clip(self.data, 0.0, 1.0))

    def to_rgb(self) -> "ImageBuffer":
        if self.channels == 3:
            return self
        return ImageBuffer(np.repeat(self.data, 3, axis=2))


@dataclass(frozen=True)
class CropSpec:
    """Axis-aligned square crop with an optional horizontal flip."""

    origin_x: int
    origin_y: int
    side: int
    flip_horizontal: bool = False

    def apply(self, img: ImageBuffer) -> ImageBuffer:
        if self.side <= 0:
            raise ValueError("crop side must be positive")
        if (
            self.origin_x < 0
            or self.origin_y < 0
            or self.origin_x + self.side > img.width
            or self.origin_y + self.side > img.height
        ):
            raise ValueError("crop not fully inside source image")
        tile = img.data[
            self.origin_y : self.origin_y + self.side,
            self.origin_x : self.origin_x + self.side,
        ]
        if self.flip_horizontal:
            tile = tile[:, ::-1]
        return ImageBuffer(tile.copy())


def load_image(path) -> ImageBuffer:
    """Load a PNG, PPM (P6) or PGM (P5) file into [0, 1] floats.

    8-bit samples map to v/255, 16-bit to v/65535.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UnreadableFileError(f"cannot read {path}: {exc}") from exc
    if raw.startswith(_PNG_SIGNATURE):
        return _decode_png(raw, path)
    if raw[:2] in (b"P5", b"P6"):
        return _decode_pnm(raw, path)
    raise UnsupportedFormatError(f"{path}: not a PNG, PPM (P6) or PGM (P5) file")


def save_image(img: ImageBuffer, path) -> None:
    """Write an 8-bit PNG/PPM/PGM, quantizing with round-half-up of 255*v."""
    path = Path(path)
    arr = as_image_array(img)
    bytes8 = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    suffix = path.suffix.lower()
    if suffix == ".png":
        payload = _encode_png(bytes8)
    elif suffix in (".ppm", ".pgm"):
        payload = _encode_pnm(bytes8, suffix)
    else:
        raise UnsupportedFormatError(f"unsupported output format: {suffix!r}")
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise UnreadableFileError(f"cannot write {path}: {exc}") from exc


def sample_crop(img: ImageBuffer, seed, side: int = DEFAULT_CROP_SIDE) -> CropSpec:
    """Draw a uniformly random valid crop origin and a fair flip bit."""
    if side > min(img.height, img.width):
        raise ValueError(
            f"crop side {side} exceeds image min side {min(img.height, img.width)}"
        )
    rng = np.random.default_rng(seed)
    ox = int(rng.integers(0, img.width - side + 1))
    oy = int(rng.integers(0, img.height - side + 1))
    flip = bool(rng.random() < 0.5)
    return CropSpec(origin_x=ox, origin_y=oy, side=side, flip_horizontal=flip)


def psnr(a, b) -> float:
    """10*log10(1/MSE) for unit-range images; +inf when the images agree."""
    xa = as_image_array(a)
    xb = as_image_array(b)
    if xa.shape != xb.shape:
        raise ShapeMismatchError(f"psnr shape mismatch: {xa.shape} vs {xb.shape}")
    mse = float(np.mean((xa - xb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# --- PNG ---------------------------------------------------------------


def _png_chunk(tag: bytes, body: bytes) -> bytes:
    return (
        struct.pack(">I", len(body))
        + tag
        + body
        + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF)
    )


def _encode_png(bytes8: np.ndarray) -> bytes:
    h, w, c = bytes8.shape
    color_type = 2 if c == 3 else 0
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    rows = bytes8.reshape(h, w * c)
    scanlines = b"".join(b"\x00" + rows[i].tobytes() for i in range(h))
    idat = zlib.compress(scanlines, 9)
    return (
        _PNG_SIGNATURE
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", idat)
        + _png_chunk(b"IEND", b"")
    )


def _decode_png(raw: bytes, path) -> ImageBuffer:
    pos = len(_PNG_SIGNATURE)
    ihdr = None
    idat = bytearray()
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise TruncatedPayloadError(f"{path}: truncated PNG chunk header")
        (length,) = struct.unpack(">I", raw[pos : pos + 4])
        tag = raw[pos + 4 : pos + 8]
        body = raw[pos + 8 : pos + 8 + length]
        if len(body) < length:
            raise TruncatedPayloadError(f"{path}: truncated PNG chunk {tag!r}")
        pos += 12 + length  # skip CRC
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", body)
        elif tag == b"IDAT":
            idat.extend(body)
        elif tag == b"IEND":
            break
    if ihdr is None:
        raise TruncatedPayloadError(f"{path}: PNG missing IHDR")
    w, h, depth, color_type, comp, filt, interlace = ihdr
    if comp != 0 or filt != 0:
        raise UnsupportedFormatError(f"{path}: nonstandard PNG compression/filter")
    if interlace != 0:
        raise UnsupportedFormatError(f"{path}: interlaced PNG not supported")
    if depth not in (8, 16) or color_type not in (0, 2):
        raise UnsupportedFormatError(
            f"{path}: only 8/16-bit gray or RGB PNGs supported "
            f"(depth={depth}, color_type={color_type})"
        )
    channels = 3 if color_type == 2 else 1
    sample_bytes = depth // 8
    stride = w * channels * sample_bytes
    try:
        flat = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise TruncatedPayloadError(f"{path}: bad PNG pixel stream: {exc}") from exc
    if len(flat) < h * (stride + 1):
        raise TruncatedPayloadError(f"{path}: PNG pixel stream too short")
    out = np.empty((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    bpp = channels * sample_bytes
    for row in range(h):
        off = row * (stride + 1)
        ftype = flat[off]
        line = np.frombuffer(flat, dtype=np.uint8, count=stride, offset=off + 1).copy()
        if ftype == 0:
            pass
        elif ftype == 1:  # sub
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif ftype == 2:  # up
            line = (line + prev) & 0xFF
        elif ftype == 3:  # average
            for i in range(stride):
                left = int(line[i - bpp]) if i >= bpp else 0
                line[i] = (line[i] + ((left + int(prev[i])) >> 1)) & 0xFF
        elif ftype == 4:  # paeth
            for i in range(stride):
                left = int(line[i - bpp]) if i >= bpp else 0
                up = int(prev[i])
                ul = int(prev[i - bpp]) if i >= bpp else 0
                line[i] = (line[i] + _paeth(left, up, ul)) & 0xFF
        else:
            raise UnsupportedFormatError(f"{path}: unknown PNG filter {ftype}")
        out[row] = line
        prev = out[row]
    if depth == 8:
        pixels = out.reshape(h, w, channels).astype(np.float64) / 255.0
    else:
        wide = out.reshape(h, w * channels, 2)
        vals = (wide[:, :, 0].astype(np.uint16) << 8) | wide[:, :, 1]
        pixels = vals.reshape(h, w, channels).astype(np.float64) / 65535.0
    return ImageBuffer(pixels)


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


# --- PPM / PGM ---------------------------------------------------------


def _encode_pnm(bytes8: np.ndarray, suffix: str) -> bytes:
    h, w, c = bytes8.shape
    if suffix == ".ppm":
        if c == 1:
            bytes8 = np.repeat(bytes8, 3, axis=2)
        header = f"P6\n{w} {h}\n255\n".encode()
    else:
        if c == 3:
            raise UnsupportedFormatError("cannot save 3-channel image as PGM")
        header = f"P5\n{w} {h}\n255\n".encode()
    return header + bytes8.tobytes()


def _decode_pnm(raw: bytes, path) -> ImageBuffer:
    magic = raw[:2]
    channels = 3 if magic == b"P6" else 1
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedPayloadError(f"{path}: truncated PNM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise UnsupportedFormatError(f"{path}: malformed PNM header") from exc
    if maxval <= 0 or maxval > 65535:
        raise UnsupportedFormatError(f"{path}: PNM maxval {maxval} out of range")
    wide = maxval > 255
    count = w * h * channels
    need = count * (2 if wide else 1)
    body = raw[pos : pos + need]
    if len(body) < need:
        raise TruncatedPayloadError(
            f"{path}: PNM payload short ({len(body)} of {need} bytes)"
        )
    if wide:
        vals = np.frombuffer(body, dtype=">u2", count=count).astype(np.float64)
    else:
        vals = np.frombuffer(body, dtype=np.uint8, count=count).astype(np.float64)
    pixels = (vals / float(maxval)).reshape(h, w, channels)
    return ImageBuffer(np.clip(pixels, 0.0, 1.0))
