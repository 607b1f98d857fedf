"""Perturbable-region masks: generation, placement grids, and shrinking."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import imaging
from .errors import EmptyMaskError, InvalidInputError, ParameterError
from .imaging import Raster


class BinaryMask:
    """Per-pixel perturbable flags, stored as a read-only ``(height, width)`` bool array."""

    __slots__ = ("_bits",)

    def __init__(self, bits):
        arr = np.array(bits, dtype=bool, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidInputError(f"mask bits must be a non-empty 2-D array, got shape {arr.shape}")
        arr.flags.writeable = False
        self._bits = arr

    @classmethod
    def full(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def from_raster(cls, img: Raster) -> "BinaryMask":
        plane = imaging.to_grayscale(img).plane() if img.channels != 1 else img.plane()
        return cls(plane > 127)

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def width(self) -> int:
        return self._bits.shape[1]

    @property
    def height(self) -> int:
        return self._bits.shape[0]

    def valid_area(self) -> int:
        return int(self._bits.sum())

    def to_raster(self) -> Raster:
        return Raster(np.where(self._bits, 255, 0).astype(np.uint8))

    def issubset(self, other: "BinaryMask") -> bool:
        return self._bits.shape == other._bits.shape and not (self._bits & ~other._bits).any()

    def centroid(self) -> tuple[int, int]:
        """Rounded mean (x, y) of the true bits."""
        ys, xs = np.nonzero(self._bits)
        if len(xs) == 0:
            raise EmptyMaskError("centroid of an empty mask")
        return int(math.floor(xs.mean() + 0.5)), int(math.floor(ys.mean() + 0.5))

    def __and__(self, other: "BinaryMask") -> "BinaryMask":
        return BinaryMask(self._bits & other._bits)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self._bits, other._bits)

    def __hash__(self):
        return hash((self._bits.shape, np.packbits(self._bits).tobytes()))

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, area={self.valid_area()})"


def read_mask(path) -> BinaryMask:
    return BinaryMask.from_raster(imaging.read_png(path))


def write_mask(mask: BinaryMask, path):
    return imaging.write_png(mask.to_raster(), path)


@dataclass(frozen=True)
class MaskParams:
    blur_kernel: int = 5
    blur_sigma: float = 1.4
    canny_low: float = 50
    canny_high: float = 150
    close_radius: int = 2


def generate_mask(sign: Raster, params: MaskParams | None = None) -> BinaryMask:
    """grayscale -> blur -> Canny -> closing -> largest contour -> filled mask."""
    p = params or MaskParams()
    rgb = imaging.as_rgb(sign) if sign.channels == 1 else sign
    gray = imaging.to_grayscale(rgb)
    blurred = imaging.gaussian_blur(gray, p.blur_kernel, p.blur_sigma)
    edges = imaging.canny_edges(blurred, p.canny_low, p.canny_high)
    outline = imaging.morph_close(edges, p.close_radius)
    contour = imaging.largest_contour(outline)
    filled = imaging.fill_contour(contour, sign.width, sign.height)
    return BinaryMask(filled.plane() > 0)


def default_stride(patch_side: int) -> int:
    return max(1, int(patch_side) // 8)


def valid_placements(mask: BinaryMask, patch_w: int, patch_h: int, stride: int = 1) -> list[tuple[int, int]]:
    """Top-left corners on the stride grid whose patch center lies on a true bit.

    The patch rectangle must also sit fully inside the image.  Row-major order.
    """
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if patch_w < 1 or patch_h < 1:
        raise ParameterError("patch dimensions must be positive")
    if patch_w > mask.width or patch_h > mask.height:
        raise ParameterError(
            f"{patch_w}x{patch_h} patch does not fit a {mask.width}x{mask.height} mask"
        )
    xs = np.arange(0, mask.width - patch_w + 1, stride)
    ys = np.arange(0, mask.height - patch_h + 1, stride)
    hit = mask.bits[np.ix_(ys + patch_h // 2, xs + patch_w // 2)]
    rows, cols = np.nonzero(hit)
    return [(int(xs[c]), int(ys[r])) for r, c in zip(rows, cols)]


def placeable_centers(mask: BinaryMask, patch_sizes: Iterable[tuple[int, int]]) -> BinaryMask:
    """Mask bits that can host the center pixel of at least one of the given patch sizes."""
    feasible = np.zeros(mask.bits.shape, dtype=bool)
    for w, h in patch_sizes:
        if w > mask.width or h > mask.height:
            continue
        feasible[h // 2:mask.height - h + h // 2 + 1, w // 2:mask.width - w + w // 2 + 1] = True
    return BinaryMask(mask.bits & feasible)


def _window(center: tuple[int, int], side: int, width: int, height: int) -> tuple[int, int, int, int]:
    """Clamped [x0, x1) x [y0, y1) bounds of a side-length square around center."""
    cx, cy = center
    x0 = cx - side // 2
    y0 = cy - side // 2
    return max(x0, 0), min(x0 + side, width), max(y0, 0), min(y0 + side, height)


def shrink_mask(mask: BinaryMask, center: tuple[int, int], fraction: float) -> BinaryMask:
    """Intersect ``mask`` with the smallest centered square keeping ``fraction`` of its area.

    The window is clipped at the image border rather than re-centered.
    Windows are nested as the side grows, so the result is monotone in
    ``fraction``.
    """
    if not 0 < fraction <= 1:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    cx, cy = center
    if not (0 <= cx < mask.width and 0 <= cy < mask.height):
        raise ParameterError(f"center {center} outside {mask.width}x{mask.height} mask")
    total = mask.valid_area()
    if total == 0 or fraction == 1:
        return mask
    target = math.ceil(fraction * total - 1e-9)

    integral = np.zeros((mask.height + 1, mask.width + 1), dtype=np.int64)
    integral[1:, 1:] = mask.bits.cumsum(axis=0).cumsum(axis=1)

    def kept(side: int) -> int:
        x0, x1, y0, y1 = _window(center, side, mask.width, mask.height)
        return int(integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0])

    lo, hi = 1, 2 * max(mask.width, mask.height) + 1
    while lo < hi:
        mid = (lo + hi) // 2
        if kept(mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    x0, x1, y0, y1 = _window(center, lo, mask.width, mask.height)
    window = np.zeros(mask.bits.shape, dtype=bool)
    window[y0:y1, x0:x1] = True
    return BinaryMask(mask.bits & window)

