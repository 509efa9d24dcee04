"""Byte-to-grayscale rendering, bilinear resizing and PGM I/O."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputTooSmall

# (exclusive upper bound in bytes, width); kB = 1000 bytes, ranges half-open
WIDTH_SCHEDULE = (
    (10_000, 32),
    (30_000, 64),
    (60_000, 128),
    (100_000, 256),
    (200_000, 384),
    (500_000, 512),
    (1_000_000, 768),
    (2_000_000, 1024),
)
MAX_WIDTH = 2048


@dataclass(frozen=True, eq=False)
class GrayImage:
    pixels: np.ndarray  # uint8, shape (height, width)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"bad image shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError("pixels must be uint8")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


def width_for_size(file_size: int) -> int:
    if file_size < 1:
        raise ValueError("file size must be >= 1")
    for bound, width in WIDTH_SCHEDULE:
        if file_size < bound:
            return width
    return MAX_WIDTH


def bytes_to_image(data: bytes) -> GrayImage:
    """One pixel per byte, width from the size schedule; an incomplete last
    row is dropped."""
    width = width_for_size(max(len(data), 1))
    height = len(data) // width
    if height == 0:
        raise InputTooSmall(f"{len(data)} bytes cannot fill one {width}-pixel row")
    px = np.frombuffer(data, dtype=np.uint8, count=height * width).reshape(height, width)
    return GrayImage(px.copy())


def _sample_grid(n_in: int, n_out: int):
    # corner-aligned: first and last output samples hit the first/last input
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(pos).astype(np.intp)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be >= 1")
    src = img.pixels.astype(np.float64)
    y0, y1, fy = _sample_grid(img.height, out_h)
    x0, x1, fx = _sample_grid(img.width, out_w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    val = top * (1 - fy) + bot * fy
    # round half up; the epsilon absorbs representation error in the weights
    out = np.floor(val + 0.5 + 1e-9)
    return GrayImage(np.clip(out, 0, 255).astype(np.uint8))


def write_pgm(img: GrayImage, path) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(img.pixels).tobytes())


def _pgm_tokens(buf: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def read_pgm(path) -> GrayImage:
    with open(path, "rb") as fh:
        buf = fh.read()
    (magic, w, h, maxval), pos = _pgm_tokens(buf, 4)
    if magic != b"P5" or int(maxval) != 255:
        raise ValueError("only binary 8-bit PGM (P5, maxval 255) is supported")
    w, h = int(w), int(h)
    raster = buf[pos:pos + w * h]
    if len(raster) != w * h:
        raise ValueError("truncated PGM raster")
    return GrayImage(np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy())


def render_file(data: bytes, size: int | None = None) -> GrayImage:
    img = bytes_to_image(data)
    if size is not None:
        img = resize_bilinear(img, size, size)
    return img
