from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctnet.tensor import (DomainError, PadSpec, avg_pool, avg_pool_backward, bilinear_sample,
                          bilinear_scatter_add, output_extent, pad_same, spatial_gradients, tensor3)


def naive_bilinear(t, x, y, c):
    """Clamp, then weight the four neighbours by hand."""
    h, w = t.shape[:2]
    x = min(max(x, 0.0), w - 1)
    y = min(max(y, 0.0), h - 1)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * t[y0, x0, c] + fx * (1 - fy) * t[y0, x1, c]
            + (1 - fx) * fy * t[y1, x0, c] + fx * fy * t[y1, x1, c])


class TestTensor3:
    def test_coerces_2d_to_single_channel(self):
        assert tensor3(np.zeros((4, 5))).shape == (4, 5, 1)

    def test_rejects_non_finite(self):
        with pytest.raises(DomainError):
            tensor3(np.array([[[np.nan]]]))

    def test_flat_layout_is_y_x_c(self):
        t = tensor3(np.arange(2 * 3 * 4).reshape(2, 3, 4))
        assert t.ravel()[(1 * 3 + 2) * 4 + 3] == t[1, 2, 3]

    def test_pad_spec_rejects_unknown_mode(self):
        with pytest.raises(DomainError):
            PadSpec("reflect")


class TestBilinearSample:
    def test_lattice_point(self, rng):
        t = rng.random((5, 6, 2))
        assert bilinear_sample(t, 2, 3, 1) == t[3, 2, 1]

    def test_constant_field(self, rng):
        t = np.full((4, 4, 1), 0.37)
        for x, y in rng.uniform(-2, 6, (20, 2)):
            assert bilinear_sample(t, x, y, 0) == pytest.approx(0.37, abs=1e-15)

    def test_two_by_two_centre(self):
        t = np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None]
        assert bilinear_sample(t, 0.5, 0.5, 0) == pytest.approx(1.5, abs=1e-15)

    def test_clamps_outside(self, rng):
        t = rng.random((4, 4, 1))
        assert bilinear_sample(t, -3.0, 10.0, 0) == t[3, 0, 0]

    def test_bad_channel(self):
        with pytest.raises(DomainError):
            bilinear_sample(np.zeros((2, 2, 1)), 0, 0, 1)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.floats(-3, 9), st.floats(-3, 9), st.integers(0, 2**31 - 1))
    def test_matches_naive(self, h, w, x, y, seed):
        t = np.random.default_rng(seed).random((h, w, 2))
        assert bilinear_sample(t, x, y, 1) == pytest.approx(naive_bilinear(t, x, y, 1), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 7), st.integers(2, 7), st.integers(0, 2**31 - 1))
    def test_exact_on_lattice(self, h, w, seed):
        r = np.random.default_rng(seed)
        t = r.normal(size=(h, w, 1))
        y, x = r.integers(0, h), r.integers(0, w)
        assert bilinear_sample(t, float(x), float(y), 0) == t[y, x, 0]


class TestScatter:
    def test_integer_point_hits_one_pixel(self):
        acc = np.zeros((3, 3, 1))
        bilinear_scatter_add(acc, 1, 2, 0, 5.0)
        assert acc[2, 1, 0] == 5.0 and acc.sum() == 5.0

    def test_quarter_split(self):
        acc = np.zeros((2, 2, 1))
        bilinear_scatter_add(acc, 0.5, 0.5, 0, 1.0)
        np.testing.assert_array_equal(acc[:, :, 0], np.full((2, 2), 0.25))

    def test_bad_channel(self):
        with pytest.raises(DomainError):
            bilinear_scatter_add(np.zeros((2, 2, 1)), 0, 0, -1, 1.0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-2, 8), st.floats(-2, 8), st.floats(-5, 5), st.integers(0, 2**31 - 1))
    def test_adjoint_identity(self, x, y, g, seed):
        t = np.random.default_rng(seed).normal(size=(5, 6, 2))
        acc = np.zeros_like(t)
        bilinear_scatter_add(acc, x, y, 1, g)
        lhs = bilinear_sample(t, x, y, 1) * g
        rhs = float(np.sum(t * acc))
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


class TestSpatialGradients:
    def test_linear_in_x(self):
        xs = np.arange(6, dtype=float)
        t = np.broadcast_to(0.7 * xs[None, :, None], (4, 6, 1))
        gx, gy = spatial_gradients(t)
        np.testing.assert_allclose(gx, 0.7, atol=1e-12)
        np.testing.assert_allclose(gy, 0.0, atol=1e-12)

    def test_affine_exact(self, rng):
        yy, xx = np.mgrid[0:5, 0:7]
        t = (1.5 * xx - 0.25 * yy + 2.0)[:, :, None]
        gx, gy = spatial_gradients(t)
        np.testing.assert_allclose(gx, 1.5, atol=1e-12)
        np.testing.assert_allclose(gy, -0.25, atol=1e-12)

    def test_constant(self):
        gx, gy = spatial_gradients(np.full((3, 3, 2), 4.0))
        assert not gx.any() and not gy.any()

    def test_interior_central_difference(self, rng):
        t = rng.random((5, 5, 1))
        gx, gy = spatial_gradients(t)
        for y in range(5):
            for x in range(1, 4):
                assert gx[y, x, 0] == pytest.approx((t[y, x + 1, 0] - t[y, x - 1, 0]) / 2)
        assert gx[2, 0, 0] == pytest.approx(t[2, 1, 0] - t[2, 0, 0])
        assert gy[4, 2, 0] == pytest.approx(t[4, 2, 0] - t[3, 2, 0])

    def test_degenerate(self):
        with pytest.raises(DomainError):
            spatial_gradients(np.zeros((1, 5, 1)))


class TestGeometry:
    def test_valid_and_same(self):
        assert output_extent(32, 7) == 26
        assert output_extent(32, 7, pad="same") == 32
        assert output_extent(32, 3, 2, "same") == 16
        assert output_extent(10, 3, 2) == 4

    def test_window_too_large(self):
        with pytest.raises(DomainError):
            output_extent(4, 5)

    def test_pad_same_fill(self):
        p = pad_same(np.ones((2, 2, 1)), 1, fill=0.0)
        assert p.shape == (4, 4, 1) and p.sum() == 4

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 30), st.integers(1, 4))
    def test_pool_extent_formula(self, extent, l, stride):
        if l > extent:
            with pytest.raises(DomainError):
                avg_pool(np.zeros((extent, extent, 1)), l, stride)
            return
        out = avg_pool(np.zeros((extent, extent, 1)), l, stride)
        assert out.shape[:2] == ((extent - l) // stride + 1,) * 2


class TestAvgPool:
    def test_twenty_six_to_twenty_four(self):
        assert avg_pool(np.zeros((26, 26, 32)), 3).shape == (24, 24, 32)

    def test_twenty_to_fourteen(self):
        assert avg_pool(np.zeros((20, 20, 100)), 7).shape == (14, 14, 100)

    def test_constant(self):
        np.testing.assert_allclose(avg_pool(np.full((9, 9, 2), 3.25), 4, 2), 3.25)

    def test_matches_naive_mean(self, rng):
        t = rng.random((9, 8, 3))
        out = avg_pool(t, 3, 2)
        for oy in range(out.shape[0]):
            for ox in range(out.shape[1]):
                np.testing.assert_allclose(out[oy, ox], t[2 * oy:2 * oy + 3, 2 * ox:2 * ox + 3].mean(axis=(0, 1)))

    def test_backward_is_adjoint(self, rng):
        t = rng.random((9, 8, 3))
        g = rng.normal(size=avg_pool(t, 3, 2).shape)
        lhs = float(np.sum(avg_pool(t, 3, 2) * g))
        rhs = float(np.sum(t * avg_pool_backward(g, t.shape, 3, 2)))
        assert lhs == pytest.approx(rhs, rel=1e-12)
