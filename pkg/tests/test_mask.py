import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from snowball.errors import EmptyMaskError, ParameterError
from snowball.imaging import Raster
from snowball.mask import (
    BinaryMask,
    MaskParams,
    default_stride,
    generate_mask,
    placeable_centers,
    read_mask,
    shrink_mask,
    valid_placements,
    write_mask,
)

from conftest import SHAPES, shape_sign


def iou(a, b):
    return (a & b).sum() / (a | b).sum()


@pytest.mark.parametrize("name", sorted(SHAPES))
def test_generate_mask_matches_shape(name):
    sign, truth = shape_sign(name)
    mask = generate_mask(sign)
    assert iou(mask.bits, truth) >= 0.9


def test_generate_mask_uniform_image_is_empty():
    with pytest.raises(EmptyMaskError):
        generate_mask(Raster(np.full((40, 40, 3), 128, dtype=np.uint8)))


def test_generate_mask_is_single_component():
    sign, _ = shape_sign("octagon")
    _, n = ndimage.label(generate_mask(sign).bits)
    assert n == 1


def test_generate_mask_respects_params():
    sign, _ = shape_sign("diamond")
    with pytest.raises(EmptyMaskError):
        generate_mask(sign, MaskParams(canny_low=2000, canny_high=2000))


def test_mask_png_roundtrip(tmp_path, rng):
    mask = BinaryMask(rng.random((9, 13)) > 0.5)
    write_mask(mask, tmp_path / "m.png")
    assert read_mask(tmp_path / "m.png") == mask


def test_default_stride():
    assert [default_stride(s) for s in (1, 7, 8, 17, 35)] == [1, 1, 1, 2, 4]


# -- placements ---------------------------------------------------------------

def test_placements_single_center_pixel():
    bits = np.zeros((3, 3), bool)
    bits[1, 1] = True
    assert valid_placements(BinaryMask(bits), 3, 3) == [(0, 0)]


def test_placements_corner_pixel_unreachable():
    bits = np.zeros((3, 3), bool)
    bits[0, 0] = True
    assert valid_placements(BinaryMask(bits), 3, 3) == []


def test_placements_full_grid():
    assert valid_placements(BinaryMask.full(5, 5), 3, 3) == [(x, y) for y in range(3) for x in range(3)]


def test_placements_stride_and_errors():
    assert valid_placements(BinaryMask.full(10, 4), 2, 2, stride=4) == [(0, 0), (4, 0), (8, 0)]
    with pytest.raises(ParameterError):
        valid_placements(BinaryMask.full(4, 4), 5, 1)
    with pytest.raises(ParameterError):
        valid_placements(BinaryMask.full(4, 4), 1, 1, stride=0)


@settings(max_examples=80, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 20), st.integers(1, 20))),
       st.integers(1, 8), st.integers(1, 8), st.integers(1, 4))
def test_placements_match_brute_force(bits, pw, ph, stride):
    h, w = bits.shape
    mask = BinaryMask(bits)
    if pw > w or ph > h:
        return
    expected = [(x, y) for y in range(0, h, stride) for x in range(0, w, stride)
                if x + pw <= w and y + ph <= h and bits[y + ph // 2, x + pw // 2]]
    assert valid_placements(mask, pw, ph, stride) == expected


def test_placeable_centers():
    mask = BinaryMask.full(6, 6)
    centers = placeable_centers(mask, [(3, 3)])
    expected = np.zeros((6, 6), bool)
    expected[1:5, 1:5] = True
    assert np.array_equal(centers.bits, expected)
    both = placeable_centers(mask, [(3, 3), (2, 6)])
    assert both.bits[3, 1:5].all() and both.bits[3, 5]


# -- shrinking ----------------------------------------------------------------

def test_shrink_fraction_one_is_identity(rng):
    mask = BinaryMask(rng.random((12, 15)) > 0.4)
    assert shrink_mask(mask, (3, 4), 1.0) == mask


def test_shrink_full_square_quarter():
    out = shrink_mask(BinaryMask.full(100, 100), (50, 50), 0.25)
    assert out.valid_area() == 2500
    ys, xs = np.nonzero(out.bits)
    assert (xs.min(), xs.max(), ys.min(), ys.max()) == (25, 74, 25, 74)


def test_shrink_clamps_at_border():
    out = shrink_mask(BinaryMask.full(20, 20), (0, 0), 0.25)
    ys, xs = np.nonzero(out.bits)
    assert xs.min() == 0 and ys.min() == 0
    assert out.valid_area() >= 100


def test_shrink_rejects_bad_arguments():
    mask = BinaryMask.full(5, 5)
    for f in (0, -0.1, 1.5):
        with pytest.raises(ParameterError):
            shrink_mask(mask, (2, 2), f)
    with pytest.raises(ParameterError):
        shrink_mask(mask, (5, 2), 0.5)


def _window_bits(shape, center, side):
    h, w = shape
    cx, cy = center
    out = np.zeros(shape, bool)
    x0, y0 = cx - side // 2, cy - side // 2
    out[max(y0, 0):max(min(y0 + side, h), 0), max(x0, 0):max(min(x0 + side, w), 0)] = True
    return out


@settings(max_examples=80, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 24), st.integers(1, 24))),
       st.floats(0.01, 1.0), st.data())
def test_shrink_is_minimal_centered_window(bits, fraction, data):
    h, w = bits.shape
    center = (data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, h - 1)))
    mask = BinaryMask(bits)
    out = shrink_mask(mask, center, fraction)
    assert out.issubset(mask)
    total = int(bits.sum())
    if total == 0 or fraction == 1:
        assert out == mask
        return
    target = int(np.ceil(fraction * total - 1e-9))
    # exhaustive sweep over window sides
    side = next(s for s in range(1, 2 * max(w, h) + 2)
                if (bits & _window_bits(bits.shape, center, s)).sum() >= target)
    assert np.array_equal(out.bits, bits & _window_bits(bits.shape, center, side))
    assert out.valid_area() >= fraction * total - 1e-9


@settings(max_examples=60, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(2, 24), st.integers(2, 24))),
       st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.data())
def test_shrink_is_monotone(bits, f1, f2, data):
    h, w = bits.shape
    center = (data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, h - 1)))
    lo, hi = sorted((f1, f2))
    mask = BinaryMask(bits)
    assert shrink_mask(mask, center, lo).issubset(shrink_mask(mask, center, hi))


@settings(max_examples=60, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(3, 20), st.integers(3, 20))),
       st.floats(0.05, 1.0), st.integers(1, 3), st.data())
def test_shrunk_placements_are_subset(bits, fraction, side, data):
    h, w = bits.shape
    center = (data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, h - 1)))
    mask = BinaryMask(bits)
    small = shrink_mask(mask, center, fraction)
    assert set(valid_placements(small, side, side)) <= set(valid_placements(mask, side, side))


def test_shrink_random_64_half_area_bound(rng):
    for _ in range(10):
        bits = rng.random((64, 64)) > 0.5
        center = (int(rng.integers(0, 64)), int(rng.integers(0, 64)))
        out = shrink_mask(BinaryMask(bits), center, 0.5)
        area = int(bits.sum())
        side = next(s for s in range(1, 130)
                    if (bits & _window_bits(bits.shape, center, s)).sum() >= 0.5 * area)
        ratio = out.valid_area() / area
        assert 0.5 <= ratio <= 0.5 + 4 * side / area
