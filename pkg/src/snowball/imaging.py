"""Pixel-level primitives on 8-bit rasters.

Everything here is a pure function: inputs are never mutated and every
result is a fresh :class:`Raster`.  Rounding to 8 bits is always
round-half-up, ``floor(v + 0.5)``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    EmptyMaskError,
    InvalidChannelError,
    InvalidInputError,
    ParameterError,
    PlacementOutOfBoundsError,
)

GRAY_WEIGHTS = (0.299, 0.587, 0.114)

# clockwise around a pixel, y pointing down: E, SE, S, SW, W, NW, N, NE
_RING = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))
_RING_INDEX = {d: i for i, d in enumerate(_RING)}
_EIGHT = np.ones((3, 3), dtype=bool)


class Raster:
    """An immutable ``height x width x channels`` uint8 image.

    ``data`` is stored row-major with shape ``(height, width, channels)``
    and is read-only; use :meth:`array` for a writable copy.
    """

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise InvalidInputError(f"raster data must be 2-D or 3-D, got shape {arr.shape}")
        if arr.shape[2] not in (1, 3, 4):
            raise InvalidChannelError(f"unsupported channel count {arr.shape[2]}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidInputError(f"raster must be at least 1x1, got {arr.shape[1]}x{arr.shape[0]}")
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise InvalidInputError("raster samples must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = np.array(arr, dtype=np.uint8, order="C", copy=True)
        arr.flags.writeable = False
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def height(self) -> int:
        return self._data.shape[0]

    @property
    def channels(self) -> int:
        return self._data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._data.shape

    def array(self) -> np.ndarray:
        return self._data.copy()

    def plane(self) -> np.ndarray:
        """The single channel of a gray raster as a 2-D view."""
        if self.channels != 1:
            raise InvalidChannelError("plane() requires a single-channel raster")
        return self._data[:, :, 0]

    def tobytes(self) -> bytes:
        return self._data.tobytes()

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self):
        return f"Raster({self.width}x{self.height}x{self.channels})"


def _round_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def _require_gray(img: Raster) -> np.ndarray:
    if img.channels != 1:
        raise InvalidChannelError(f"expected a 1-channel raster, got {img.channels}")
    return img.plane()


def _require_binary(img: Raster) -> np.ndarray:
    plane = _require_gray(img)
    if not np.isin(plane, (0, 255)).all():
        raise InvalidInputError("binary raster must contain only 0 and 255")
    return plane


# --------------------------------------------------------------------------
# PNG I/O
# --------------------------------------------------------------------------

def _from_pil(im: Image.Image) -> Raster:
    if im.mode in ("L", "RGB", "RGBA"):
        pass
    elif im.mode == "1":
        im = im.convert("L")
    elif im.mode in ("LA", "PA") or (im.mode == "P" and "transparency" in im.info):
        im = im.convert("RGBA")
    elif im.mode in ("P", "CMYK", "YCbCr"):
        im = im.convert("RGB")
    else:
        raise InvalidInputError(f"unsupported PNG mode {im.mode!r}; 8-bit only")
    return Raster(np.asarray(im))


def decode_png(payload: bytes) -> Raster:
    with Image.open(io.BytesIO(payload)) as im:
        im.load()
        return _from_pil(im)


def read_png(path) -> Raster:
    with Image.open(path) as im:
        im.load()
        return _from_pil(im)


def _to_pil(img: Raster) -> Image.Image:
    if img.channels == 1:
        return Image.fromarray(img.plane(), mode="L")
    return Image.fromarray(img.data, mode="RGB" if img.channels == 3 else "RGBA")


def encode_png(img: Raster) -> bytes:
    buf = io.BytesIO()
    _to_pil(img).save(buf, format="PNG")
    return buf.getvalue()


def write_png(img: Raster, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(img))
    return path


def as_rgb(img: Raster) -> Raster:
    """Drop alpha or replicate gray so the result has 3 channels."""
    if img.channels == 3:
        return img
    if img.channels == 4:
        return Raster(img.data[:, :, :3])
    return Raster(np.repeat(img.data, 3, axis=2))


def as_rgba(img: Raster) -> Raster:
    if img.channels == 4:
        return img
    rgb = as_rgb(img).data
    alpha = np.full(rgb.shape[:2] + (1,), 255, dtype=np.uint8)
    return Raster(np.concatenate([rgb, alpha], axis=2))


# --------------------------------------------------------------------------
# Color, blur, edges
# --------------------------------------------------------------------------

def to_grayscale(img: Raster) -> Raster:
    if img.channels not in (3, 4):
        raise InvalidChannelError(f"to_grayscale needs 3 or 4 channels, got {img.channels}")
    rgb = img.data[:, :, :3].astype(np.float64)
    r, g, b = GRAY_WEIGHTS
    return Raster(_round_u8(r * rgb[:, :, 0] + g * rgb[:, :, 1] + b * rgb[:, :, 2]))


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian sampled at integer offsets."""
    if size < 1 or size % 2 == 0:
        raise ParameterError(f"kernel size must be odd and >= 1, got {size}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    half = size // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _convolve_axis(values: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    half = len(kernel) // 2
    if half == 0:
        return values * kernel[0]
    pad = [(0, 0)] * values.ndim
    pad[axis] = (half, half)
    padded = np.pad(values, pad, mode="edge")
    n = values.shape[axis]
    out = np.zeros_like(values, dtype=np.float64)
    for i, w in enumerate(kernel):
        out += w * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(img: Raster, kernel_size: int = 5, sigma: float = 1.4) -> Raster:
    plane = _require_gray(img)
    kernel = gaussian_kernel(kernel_size, sigma)
    if kernel_size == 1:
        return Raster(plane)
    values = plane.astype(np.float64)
    values = _convolve_axis(values, kernel, axis=1)
    values = _convolve_axis(values, kernel, axis=0)
    return Raster(_round_u8(values))


def sobel_gradients(plane: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel responses (gx, gy) with edge-replicate padding, y pointing down."""
    p = np.pad(plane.astype(np.float64), 1, mode="edge")
    h, w = plane.shape

    def at(dy, dx):
        return p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    gx = (at(-1, 1) + 2 * at(0, 1) + at(1, 1)) - (at(-1, -1) + 2 * at(0, -1) + at(1, -1))
    gy = (at(1, -1) + 2 * at(1, 0) + at(1, 1)) - (at(-1, -1) + 2 * at(-1, 0) + at(-1, 1))
    return gx, gy


def _non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")

    def shifted(dx, dy):
        return padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    sector = np.zeros(mag.shape, dtype=np.int8)
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3

    # (forward, backward) neighbor offsets along the gradient for each sector
    neighbors = {0: ((1, 0), (-1, 0)), 1: ((1, 1), (-1, -1)), 2: ((0, 1), (0, -1)), 3: ((-1, 1), (1, -1))}
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (fwd, bwd) in neighbors.items():
        # ">= forward, > backward" thins plateaus of equal magnitude to one pixel
        cond = (mag >= shifted(*fwd)) & (mag > shifted(*bwd))
        keep |= (sector == s) & cond
    return np.where(keep, mag, 0.0)


def canny_edges(img: Raster, low: float = 50, high: float = 150) -> Raster:
    """Canny edge map; thresholds apply to the raw L2 Sobel magnitude.

    Output pixels are 0 or 255.
    """
    if low < 0 or high < 0:
        raise ParameterError("Canny thresholds must be non-negative")
    if low > high:
        raise ParameterError(f"low threshold {low} exceeds high threshold {high}")
    plane = _require_gray(img)
    gx, gy = sobel_gradients(plane)
    mag = np.hypot(gx, gy)
    thin = _non_max_suppression(mag, gx, gy)
    strong = thin > high
    candidate = thin > low
    labels, count = ndimage.label(candidate, structure=_EIGHT)
    if count == 0:
        return Raster(np.zeros(plane.shape, dtype=np.uint8))
    seeded = np.zeros(count + 1, dtype=bool)
    seeded[np.unique(labels[strong])] = True
    seeded[0] = False
    return Raster(np.where(seeded[labels], 255, 0).astype(np.uint8))


# --------------------------------------------------------------------------
# Morphology and contours
# --------------------------------------------------------------------------

def morph_close(binary: Raster, radius: int = 2) -> Raster:
    """Dilate then erode with a (2r+1)-square, treating the outside as background.

    The image is zero-extended by ``radius`` first, so the result is the
    true closing of the zero-extended set cropped back to the frame.
    """
    plane = _require_binary(binary)
    if radius < 1:
        raise ParameterError(f"closing radius must be >= 1, got {radius}")
    size = 2 * radius + 1
    padded = np.pad(plane, radius, mode="constant")
    dilated = ndimage.maximum_filter(padded, size=size, mode="constant", cval=0)
    closed = ndimage.minimum_filter(dilated, size=size, mode="constant", cval=255)
    return Raster(closed[radius:-radius, radius:-radius])


@dataclass(frozen=True)
class Contour:
    points: tuple[tuple[int, int], ...]
    closed: bool = True

    def __post_init__(self):
        object.__setattr__(self, "points", tuple((int(x), int(y)) for x, y in self.points))
        if self.closed and len(self.points) < 3:
            raise ParameterError("a closed contour needs at least 3 points")

    def __len__(self):
        return len(self.points)

    def area(self) -> float:
        return polygon_area(self.points)


def polygon_area(points: Sequence[tuple[int, int]]) -> float:
    """Absolute shoelace area of a closed polygon."""
    if len(points) < 3:
        return 0.0
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))) / 2.0


def trace_boundary(component: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Moore-neighbor trace of the outer boundary of one 8-connected blob.

    ``start`` must be the blob's first pixel in row-major order.  The walk
    is clockwise and stops by Jacob's criterion (back at the start pixel
    about to repeat the first move).
    """
    h, w = component.shape
    grid = np.zeros((h + 2, w + 2), dtype=bool)
    grid[1:-1, 1:-1] = component
    sx, sy = start[0] + 1, start[1] + 1
    p = (sx, sy)
    back = _RING_INDEX[(-1, 0)]
    points = [p]
    first_move = None
    limit = 4 * int(component.sum()) + 16
    for _ in range(limit):
        for step in range(1, 9):
            d = (back + step) % 8
            q = (p[0] + _RING[d][0], p[1] + _RING[d][1])
            if grid[q[1], q[0]]:
                break
        else:
            break  # isolated pixel
        if p == (sx, sy) and first_move is not None and d == first_move:
            points.pop()
            break
        if first_move is None:
            first_move = d
        checked = _RING[(d - 1) % 8]
        prev = (p[0] + checked[0], p[1] + checked[1])
        back = _RING_INDEX[(prev[0] - q[0], prev[1] - q[1])]
        p = q
        points.append(p)
    return [(x - 1, y - 1) for x, y in points]


def largest_contour(binary: Raster) -> Contour:
    """Boundary of the 8-connected foreground blob with the largest shoelace area.

    Ties go to the blob met first in a row-major scan.
    """
    plane = _require_binary(binary)
    labels, count = ndimage.label(plane > 0, structure=_EIGHT)
    if count == 0:
        raise EmptyMaskError("no foreground pixel to trace")
    best_points: list[tuple[int, int]] | None = None
    best_area = -1.0
    for index, box in enumerate(ndimage.find_objects(labels), start=1):
        if box is None:
            continue
        sub = labels[box] == index
        ys, xs = np.nonzero(sub)
        # nonzero is row-major, so element 0 is the first pixel of the blob
        pts = trace_boundary(sub, (int(xs[0]), int(ys[0])))
        off_y, off_x = box[0].start, box[1].start
        pts = [(x + off_x, y + off_y) for x, y in pts]
        area = polygon_area(pts)
        if area > best_area:
            best_area = area
            best_points = pts
    assert best_points is not None
    while len(best_points) < 3:
        best_points = best_points + best_points[:1]
    return Contour(tuple(best_points), closed=True)


def _line_pixels(x0, y0, x1, y1) -> tuple[np.ndarray, np.ndarray]:
    steps = int(max(abs(x1 - x0), abs(y1 - y0)))
    t = np.linspace(0.0, 1.0, steps + 1)
    xs = np.floor(x0 + t * (x1 - x0) + 0.5).astype(np.int64)
    ys = np.floor(y0 + t * (y1 - y0) + 0.5).astype(np.int64)
    return xs, ys


def fill_contour(c: Contour, width: int, height: int) -> Raster:
    """Scanline polygon fill; interior and boundary become 255."""
    if not c.closed:
        raise ParameterError("cannot fill an open contour")
    if width < 1 or height < 1:
        raise ParameterError("fill target must be at least 1x1")
    pts = np.asarray(c.points, dtype=np.float64)
    if (pts[:, 0] < 0).any() or (pts[:, 0] >= width).any() or (pts[:, 1] < 0).any() or (pts[:, 1] >= height).any():
        raise ParameterError("contour point outside the raster bounds")
    out = np.zeros((height, width), dtype=np.uint8)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    sloped = y0 != y1
    ex0, ey0, ex1, ey1 = x0[sloped], y0[sloped], x1[sloped], y1[sloped]
    ylo, yhi = np.minimum(ey0, ey1), np.maximum(ey0, ey1)
    for row in range(int(ylo.min()) if len(ylo) else 0, int(yhi.max()) + 1 if len(yhi) else 0):
        # half-open [ylo, yhi) so shared vertices count once
        active = (ylo <= row) & (row < yhi)
        if not active.any():
            continue
        xa = ex0[active] + (row - ey0[active]) * (ex1[active] - ex0[active]) / (ey1[active] - ey0[active])
        xa.sort()
        for left, right in zip(xa[0::2], xa[1::2]):
            lo = max(int(math.ceil(left - 1e-9)), 0)
            hi = min(int(math.floor(right + 1e-9)), width - 1)
            if lo <= hi:
                out[row, lo:hi + 1] = 255
    for (ax, ay), (bx, by) in zip(c.points, c.points[1:] + c.points[:1]):
        xs, ys = _line_pixels(ax, ay, bx, by)
        out[ys, xs] = 255
    return Raster(out)


# --------------------------------------------------------------------------
# Geometry and compositing
# --------------------------------------------------------------------------

def _premultiply(rgba: np.ndarray) -> np.ndarray:
    values = rgba.astype(np.float64)
    values[:, :, :3] *= values[:, :, 3:4] / 255.0
    return values


def _unpremultiply(values: np.ndarray) -> np.ndarray:
    alpha = values[:, :, 3:4]
    out = values.copy()
    safe = np.where(alpha > 0, alpha, 1.0)
    out[:, :, :3] = np.where(alpha > 0, values[:, :, :3] * 255.0 / safe, 0.0)
    return _round_u8(out)


def _bilinear_sample(values: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample ``values`` (h, w, c) at float coords; outside the frame reads as zero."""
    h, w, c = values.shape
    padded = np.zeros((h + 2, w + 2, c), dtype=np.float64)
    padded[1:-1, 1:-1] = values
    px, py = sx + 1.0, sy + 1.0
    inside = (px >= 0) & (px <= w + 1) & (py >= 0) & (py <= h + 1)
    px = np.clip(px, 0, w + 1)
    py = np.clip(py, 0, h + 1)
    x0 = np.minimum(np.floor(px).astype(np.int64), w)
    y0 = np.minimum(np.floor(py).astype(np.int64), h)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    top = padded[y0, x0] * (1 - fx) + padded[y0, x0 + 1] * fx
    bottom = padded[y0 + 1, x0] * (1 - fx) + padded[y0 + 1, x0 + 1] * fx
    out = top * (1 - fy) + bottom * fy
    out[~inside] = 0.0
    return out


def resize_bilinear(img: Raster, width: int, height: int) -> Raster:
    """Pixel-center-aligned bilinear resize; RGBA is interpolated premultiplied."""
    if width < 1 or height < 1:
        raise ParameterError(f"target size {width}x{height} is below 1x1")
    if (width, height) == (img.width, img.height):
        return img
    rgba = img.channels == 4
    values = _premultiply(img.data) if rgba else img.data.astype(np.float64)
    sx = (np.arange(width) + 0.5) * (img.width / width) - 0.5
    sy = (np.arange(height) + 0.5) * (img.height / height) - 0.5
    sx = np.clip(sx, 0, img.width - 1)
    sy = np.clip(sy, 0, img.height - 1)
    gx, gy = np.meshgrid(sx, sy)
    out = _bilinear_sample(values, gx, gy)
    return Raster(_unpremultiply(out) if rgba else _round_u8(out))


def scaled_size(width: int, height: int, scale: float) -> tuple[int, int]:
    return int(math.floor(width * scale + 0.5)), int(math.floor(height * scale + 0.5))


def rotated_size(width: int, height: int, angle: float) -> tuple[int, int]:
    if angle % 90 == 0:
        return (height, width) if (angle // 90) % 2 else (width, height)
    t = math.radians(angle)
    c, s = abs(math.cos(t)), abs(math.sin(t))
    return (int(math.ceil(width * c + height * s - 1e-9)),
            int(math.ceil(width * s + height * c - 1e-9)))


def transform_patch(patch: Raster, scale: float = 1.0, angle: float = 0.0) -> Raster:
    """Scale (bilinear) then rotate counter-clockwise about the center.

    Multiples of 90 degrees are exact pixel permutations.  Other angles
    grow the canvas to the rotated extent and leave uncovered corners
    fully transparent.
    """
    if patch.channels != 4:
        raise InvalidChannelError("patches must be RGBA")
    if not scale > 0:
        raise ParameterError(f"scale must be positive, got {scale}")
    if not 0 <= angle < 360:
        raise ParameterError(f"angle must lie in [0, 360), got {angle}")
    w, h = scaled_size(patch.width, patch.height, scale)
    if w < 1 or h < 1:
        raise ParameterError(f"scale {scale} shrinks the patch below 1x1")
    scaled = resize_bilinear(patch, w, h)
    if angle == 0:
        return scaled
    if angle % 90 == 0:
        return Raster(np.rot90(scaled.data, k=int(angle // 90)))

    out_w, out_h = rotated_size(w, h, angle)
    t = math.radians(angle)
    cos_t, sin_t = math.cos(t), math.sin(t)
    du, dv = np.meshgrid(np.arange(out_w) - (out_w - 1) / 2.0, np.arange(out_h) - (out_h - 1) / 2.0)
    sx = du * cos_t - dv * sin_t + (w - 1) / 2.0
    sy = du * sin_t + dv * cos_t + (h - 1) / 2.0
    sampled = _bilinear_sample(_premultiply(scaled.data), sx, sy)
    return Raster(_unpremultiply(sampled))


def composite(base: Raster, patch: Raster, x: int, y: int) -> Raster:
    """Alpha-over ``patch`` onto ``base`` with its top-left corner at (x, y)."""
    if base.channels != 3:
        raise InvalidChannelError("composite base must be RGB")
    if patch.channels != 4:
        raise InvalidChannelError("composite patch must be RGBA")
    x, y = int(x), int(y)
    if x < 0 or y < 0 or x + patch.width > base.width or y + patch.height > base.height:
        raise PlacementOutOfBoundsError(
            f"{patch.width}x{patch.height} patch at ({x}, {y}) exceeds {base.width}x{base.height} base"
        )
    out = base.array()
    region = out[y:y + patch.height, x:x + patch.width].astype(np.int32)
    rgb = patch.data[:, :, :3].astype(np.int32)
    alpha = patch.data[:, :, 3:4].astype(np.int32)
    blended = alpha * rgb + (255 - alpha) * region
    # round(v / 255) half-up in exact integer arithmetic
    out[y:y + patch.height, x:x + patch.width] = ((2 * blended + 255) // 510).astype(np.uint8)
    return Raster(out)
