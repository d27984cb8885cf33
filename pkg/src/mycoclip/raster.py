"""Rasterization of structure graphs, stage colours and the growth timeline.

Rendering has no anti-aliasing: a pixel is painted when its center lies
inside a circle or within half a stroke width of a segment.  That keeps
renders bit-exact and lets tests recompute coverage independently.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, RangeError
from .morphology import StageClass, StructureGraph

RGB = tuple[int, int, int]


@dataclass(frozen=True)
class ColorGradient:
    start_rgb: RGB
    end_rgb: RGB

    def __post_init__(self):
        for c in (*self.start_rgb, *self.end_rgb):
            if not 0 <= c <= 255:
                raise RangeError(f"colour channel {c} outside [0, 255]")

    def at(self, t: float) -> RGB:
        t = min(max(float(t), 0.0), 1.0)
        return tuple(int(round(a + t * (b - a))) for a, b in zip(self.start_rgb, self.end_rgb))


STAGE_GRADIENTS: dict[StageClass, ColorGradient] = {
    StageClass.SPORE: ColorGradient((255, 255, 0), (255, 165, 0)),
    StageClass.HYPHAE: ColorGradient((255, 165, 0), (255, 120, 0)),
    StageClass.MYCELIUM: ColorGradient((255, 69, 0), (139, 0, 0)),
}

BACKGROUND: RGB = (0, 0, 0)


@dataclass(frozen=True)
class TimelineSpec:
    duration_s: float = 100.0
    temp_min: float = 300.0
    temp_max: float = 400.0
    # lower edges of the hyphae and mycelium bands; bands are half-open below
    hyphae_from: float = 330.0
    mycelium_from: float = 370.0

    def band(self, stage: StageClass) -> tuple[float, float]:
        edges = (self.temp_min, self.hyphae_from, self.mycelium_from, self.temp_max)
        return edges[stage], edges[stage + 1]

    def time_band(self, stage: StageClass) -> tuple[float, float]:
        lo, hi = self.band(stage)
        return self.time_at(lo), self.time_at(hi)

    def time_at(self, temp: float) -> float:
        return (temp - self.temp_min) * self.duration_s / (self.temp_max - self.temp_min)


def temperature_at(time_s: float, spec: TimelineSpec = TimelineSpec()) -> float:
    if not 0.0 <= time_s <= spec.duration_s:
        raise RangeError(f"time {time_s} s outside [0, {spec.duration_s}] s")
    return spec.temp_min + time_s * (spec.temp_max - spec.temp_min) / spec.duration_s


def stage_for_temperature(temp: float, spec: TimelineSpec = TimelineSpec()) -> StageClass:
    if not spec.temp_min <= temp <= spec.temp_max:
        raise RangeError(f"temperature {temp} K outside [{spec.temp_min}, {spec.temp_max}] K")
    if temp < spec.hyphae_from:
        return StageClass.SPORE
    if temp < spec.mycelium_from:
        return StageClass.HYPHAE
    return StageClass.MYCELIUM


def sample_time(stage: StageClass, rng: np.random.Generator, spec: TimelineSpec = TimelineSpec()) -> float:
    """Draw a time point inside the stage's band of the timeline."""
    lo, hi = spec.time_band(stage)
    t = float(rng.uniform(lo, hi))
    # uniform() may round up to hi, which belongs to the next band
    return t if stage_for_temperature(temperature_at(t, spec), spec) == stage else lo


@dataclass
class RasterImage:
    pixels: np.ndarray  # (height, width, 3) uint8
    stage: StageClass | None = None
    time_s: float | None = None
    temperature_K: float | None = None

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def circle_mask(shape: tuple[int, int], center, radius: float):
    """Boolean coverage of a filled circle, restricted to its bounding box.

    Returns ``(rows, cols, mask)`` slices into an image of ``shape``.
    """
    h, w = shape
    cx, cy = center
    x0, x1 = max(int(np.floor(cx - radius)), 0), min(int(np.ceil(cx + radius)) + 1, w)
    y0, y1 = max(int(np.floor(cy - radius)), 0), min(int(np.ceil(cy + radius)) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return slice(0, 0), slice(0, 0), np.zeros((0, 0), bool)
    px = np.arange(x0, x1) + 0.5
    py = np.arange(y0, y1)[:, None] + 0.5
    return slice(y0, y1), slice(x0, x1), (px - cx) ** 2 + (py - cy) ** 2 <= radius * radius


def stroke_half_width(width: float) -> float:
    # sub-pixel strokes still cover the pixels their centre line crosses
    return max(width / 2.0, 0.5)


def segment_mask(shape: tuple[int, int], start, end, width: float):
    h, w = shape
    hw = stroke_half_width(width)
    (ax, ay), (bx, by) = start, end
    x0 = max(int(np.floor(min(ax, bx) - hw)), 0)
    x1 = min(int(np.ceil(max(ax, bx) + hw)) + 1, w)
    y0 = max(int(np.floor(min(ay, by) - hw)), 0)
    y1 = min(int(np.ceil(max(ay, by) + hw)) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return slice(0, 0), slice(0, 0), np.zeros((0, 0), bool)
    px = np.arange(x0, x1) + 0.5 - ax
    py = np.arange(y0, y1)[:, None] + 0.5 - ay
    dx, dy = bx - ax, by - ay
    ll = dx * dx + dy * dy
    if ll > 0:
        t = np.clip((px * dx + py * dy) / ll, 0.0, 1.0)
    else:
        t = 0.0
    ex = px - t * dx
    ey = py - t * dy
    return slice(y0, y1), slice(x0, x1), ex * ex + ey * ey <= hw * hw


def _paint_segments(img: np.ndarray, coords: np.ndarray, color: RGB) -> None:
    """Vectorized :func:`segment_mask` over rows of ``(ax, ay, bx, by, width)``."""
    h, w, _ = img.shape
    ax, ay, bx, by, width = coords.T
    hw = np.maximum(width / 2.0, 0.5)
    x0 = np.floor(np.minimum(ax, bx) - hw).astype(int)
    y0 = np.floor(np.minimum(ay, by) - hw).astype(int)
    span = int(np.max(np.ceil(np.maximum(np.abs(bx - ax), np.abs(by - ay)) + 2 * hw))) + 2
    off = np.arange(span)
    gx, gy = np.broadcast_arrays(x0[:, None, None] + off[None, None, :], y0[:, None, None] + off[None, :, None])
    px = gx + 0.5 - ax[:, None, None]
    py = gy + 0.5 - ay[:, None, None]
    dx = (bx - ax)[:, None, None]
    dy = (by - ay)[:, None, None]
    ll = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(ll > 0, np.clip((px * dx + py * dy) / np.where(ll > 0, ll, 1.0), 0.0, 1.0), 0.0)
    ex = px - t * dx
    ey = py - t * dy
    hit = (ex * ex + ey * ey <= (hw * hw)[:, None, None]) & (gx >= 0) & (gx < w) & (gy >= 0) & (gy < h)
    img[gy[hit], gx[hit]] = color


def render(
    graph: StructureGraph,
    gradient: ColorGradient | None = None,
    canvas=None,
    background_rgb: RGB = BACKGROUND,
) -> RasterImage:
    """Paint segments (shallow first) and then circles on a uniform background.

    Stroke colour is the gradient at ``depth / branch_depth``; circles use the
    gradient start colour.
    """
    if gradient is None:
        gradient = STAGE_GRADIENTS[graph.stage]
    if canvas is None:
        canvas = graph.canvas
    w, h = (canvas, canvas) if isinstance(canvas, int) else canvas
    if w <= 0 or h <= 0:
        raise DimensionError(f"cannot render onto a {w}x{h} canvas")
    img = np.empty((h, w, 3), np.uint8)
    img[:] = background_rgb
    depth_max = max(graph.branch_depth, 1)
    by_depth: dict[int, list] = {}
    for seg in graph.segments:
        by_depth.setdefault(seg.depth, []).append(seg)
    # strokes of one depth share a colour, so their mutual order is irrelevant
    for depth in sorted(by_depth):
        segs = by_depth[depth]
        coords = np.array([(*s.start, *s.end, s.width) for s in segs], float)
        _paint_segments(img, coords, gradient.at(depth / depth_max))
    start = gradient.at(0.0)
    for c in graph.circles:
        rows, cols, mask = circle_mask((h, w), c.center, c.radius)
        img[rows, cols][mask] = start
    return RasterImage(img, graph.stage)


_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)


def encode_png(pixels: np.ndarray) -> bytes:
    """8-bit RGB PNG, filter type 0 on every row."""
    h, w, _ = pixels.shape
    raw = np.zeros((h, 1 + 3 * w), np.uint8)
    raw[:, 1:] = pixels.reshape(h, 3 * w)
    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (
        _PNG_SIGNATURE
        + _chunk(b"IHDR", header)
        + _chunk(b"IDAT", zlib.compress(raw.tobytes(), 6))
        + _chunk(b"IEND", b"")
    )


def decode_png(data: bytes) -> np.ndarray:
    """Decode the PNG subset written by :func:`encode_png`."""
    if not data.startswith(_PNG_SIGNATURE):
        raise ValueError("not a PNG file")
    pos = len(_PNG_SIGNATURE)
    idat = []
    w = h = None
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        body = data[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            w, h, depth, colour, _, _, interlace = struct.unpack(">IIBBBBB", body)
            if (depth, colour, interlace) != (8, 2, 0):
                raise ValueError("only 8-bit non-interlaced RGB PNGs are supported")
        elif tag == b"IDAT":
            idat.append(body)
        elif tag == b"IEND":
            break
    if w is None:
        raise ValueError("PNG has no IHDR chunk")
    raw = np.frombuffer(zlib.decompress(b"".join(idat)), np.uint8).reshape(h, 1 + 3 * w)
    if raw[:, 0].any():
        raise ValueError("only filter type 0 is supported")
    return raw[:, 1:].reshape(h, w, 3).copy()


def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError("only binary 8-bit PPM (P6) is supported")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: 3 * w * h], np.uint8).reshape(h, w, 3).copy()


def write_image(image: RasterImage | np.ndarray, path) -> bytes:
    """Write a lossless PNG (or PPM for ``.ppm`` paths); returns the bytes written."""
    path = Path(path)
    pixels = image.pixels if isinstance(image, RasterImage) else image
    data = encode_ppm(pixels) if path.suffix.lower() == ".ppm" else encode_png(pixels)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write image {path}: {exc.strerror}") from exc
    return data


def read_image(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    return decode_ppm(data) if path.suffix.lower() == ".ppm" else decode_png(data)
