"""Bilinear warping and resizing: identity cases, hand computations, gather oracle."""

import numpy as np
import pytest

from stylewarp.functional import grid_sample_bilinear, resize_bilinear
from stylewarp.tensor import ShapeError, Tensor


def make_flow(dx, dy, h, w):
    f = np.zeros((1, 2, h, w))
    f[0, 0] = dx
    f[0, 1] = dy
    return Tensor(f)


def test_zero_flow_is_bit_exact_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5, 6))
    flow = Tensor(np.zeros((2, 2, 5, 6)))
    out = grid_sample_bilinear(Tensor(x), flow)
    assert np.array_equal(out.data, x)


def test_unit_flow_shifts_ramp_with_clamped_border():
    # 4x4 horizontal ramp, flow (1, 0): out(x) = in(x+1), right border clamped
    ramp = np.tile(np.arange(4.0), (4, 1)).reshape(1, 1, 4, 4)
    out = grid_sample_bilinear(Tensor(ramp), make_flow(1.0, 0.0, 4, 4))
    want = np.tile(np.array([1.0, 2.0, 3.0, 3.0]), (4, 1)).reshape(1, 1, 4, 4)
    assert np.array_equal(out.data, want)


def test_half_pixel_flow_averages_columns():
    img = np.array([[3.0, 7.0]] * 3).reshape(1, 1, 3, 2)
    out = grid_sample_bilinear(Tensor(img), make_flow(0.5, 0.0, 3, 2))
    assert np.allclose(out.data[0, 0, :, 0], 5.0)


def test_integer_flow_is_pure_gather():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 6, 6))
    dx, dy = 2.0, -1.0
    out = grid_sample_bilinear(Tensor(x), make_flow(dx, dy, 6, 6))
    # direct indexing oracle with border clamping
    want = np.empty_like(x)
    for i in range(6):
        for j in range(6):
            si = min(max(i + int(dy), 0), 5)
            sj = min(max(j + int(dx), 0), 5)
            want[0, :, i, j] = x[0, :, si, sj]
    assert np.array_equal(out.data, want)


def test_flow_channel_count_checked():
    with pytest.raises(ShapeError):
        grid_sample_bilinear(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 3, 4, 4))))
    with pytest.raises(ShapeError):
        grid_sample_bilinear(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 2, 3, 4))))


def test_same_size_resize_is_identity():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 5, 7))
    out = resize_bilinear(Tensor(x), 5, 7)
    assert np.array_equal(out.data, x)


def test_resize_2x2_to_1x1_is_mean():
    x = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)
    out = resize_bilinear(Tensor(x), 1, 1)
    assert out.data[0, 0, 0, 0] == pytest.approx(4.0, abs=1e-14)


@pytest.mark.parametrize("hw", [(1, 1), (3, 3), (4, 6), (9, 2)])
def test_resize_preserves_constants(hw):
    x = Tensor(np.full((1, 3, 4, 4), 0.37))
    out = resize_bilinear(x, *hw)
    assert np.allclose(out.data, 0.37, atol=1e-15, rtol=0)


def test_resize_upscale_matches_manual_half_pixel_formula():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 1, 3, 3))
    out = resize_bilinear(Tensor(x), 6, 6)
    for i in range(6):
        for j in range(6):
            sy = min(max((i + 0.5) * 0.5 - 0.5, 0.0), 2.0)
            sx = min(max((j + 0.5) * 0.5 - 0.5, 0.0), 2.0)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, 2), min(x0 + 1, 2)
            fy, fx = sy - y0, sx - x0
            want = (1 - fy) * ((1 - fx) * x[0, 0, y0, x0] + fx * x[0, 0, y0, x1]) + fy * (
                (1 - fx) * x[0, 0, y1, x0] + fx * x[0, 0, y1, x1]
            )
            assert out.data[0, 0, i, j] == pytest.approx(want, abs=1e-13)
