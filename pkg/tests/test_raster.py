import numpy as np
import pytest

from conftest import fd_grad, rel_err
from lorf.errors import OutOfBounds, TooManyLevels
from lorf.raster import (Raster, build_pyramid, gradient_adjoint,
                         image_gradients, load_pfm, load_png, sample_bilinear,
                         sample_bilinear_many, save_pfm, save_png)


def test_sample_exact_at_integer_coords():
    rng = np.random.default_rng(0)
    r = Raster(rng.random((7, 9, 3)).astype(np.float32))
    for _ in range(30):
        u = rng.integers(0, 9)
        v = rng.integers(0, 7)
        val, _ = sample_bilinear(r, [u, v])
        assert np.allclose(val, r.data[v, u], atol=1e-7)


def test_sample_midpoint_of_four_texels():
    r = Raster(np.array([[0.0, 1.0], [2.0, 3.0]]))
    val, grad = sample_bilinear(r, [0.5, 0.5])
    assert np.isclose(val[0], 1.5)
    assert np.isclose(grad[0, 0], 1.0)  # d/du
    assert np.isclose(grad[1, 0], 2.0)  # d/dv


def test_sample_gradient_fd():
    rng = np.random.default_rng(1)
    r = Raster(rng.random((12, 12, 2)).astype(np.float32))
    for _ in range(40):
        uv = rng.uniform(0.1, 10.9, size=2)
        # stay away from texel boundaries where the interpolant kinks
        uv = np.floor(uv) + np.clip(uv - np.floor(uv), 0.05, 0.95)
        _, grad = sample_bilinear(r, uv)
        for c in range(2):
            g_fd = fd_grad(lambda p: sample_bilinear(r, p)[0][c], uv)
            assert rel_err(grad[:, c], g_fd) < 1e-5


def test_sample_out_of_bounds_raises():
    r = Raster(np.zeros((4, 4)))
    with pytest.raises(OutOfBounds):
        sample_bilinear(r, [-0.1, 2])
    with pytest.raises(OutOfBounds):
        sample_bilinear(r, [2, 3.01])


def test_sample_continuity():
    rng = np.random.default_rng(2)
    r = Raster(rng.random((8, 8)).astype(np.float32))
    for _ in range(20):
        uv = rng.uniform(0.5, 6.5, size=2)
        v1, _ = sample_bilinear(r, uv)
        v2, _ = sample_bilinear(r, uv + 1e-9)
        assert np.abs(v1 - v2).max() < 1e-7


def test_pyramid_constant():
    r = Raster(np.full((16, 16), 0.7))
    pyr = build_pyramid(r, 4)
    for lvl in pyr.levels:
        assert np.allclose(lvl.data, 0.7)


def test_pyramid_checkerboard():
    base = np.indices((4, 4)).sum(axis=0) % 2
    pyr = build_pyramid(Raster(base.astype(float)), 2)
    assert pyr[1].data.shape == (2, 2, 1)
    assert np.allclose(pyr[1].data, 0.5)


def test_pyramid_dimensions_and_mean():
    rng = np.random.default_rng(3)
    r = Raster(rng.random((32, 48)).astype(np.float32))
    pyr = build_pyramid(r, 4)
    for l, lvl in enumerate(pyr.levels):
        assert lvl.height == -(-32 // 2 ** l)
        assert lvl.width == -(-48 // 2 ** l)
        assert abs(lvl.data.mean() - r.data.mean()) < 1e-6


def test_pyramid_too_many_levels():
    with pytest.raises(TooManyLevels):
        build_pyramid(Raster(np.zeros((4, 4))), 4)


def test_gradients_constant_and_ramp():
    gx, gy = image_gradients(Raster(np.full((6, 6), 2.0)))
    assert np.allclose(gx.data, 0) and np.allclose(gy.data, 0)
    u = np.tile(np.arange(8, dtype=float), (6, 1))
    gx, gy = image_gradients(Raster(u))
    assert np.allclose(gx.data, 1.0)
    assert np.allclose(gy.data, 0.0)


def test_gradients_match_per_pixel_oracle():
    rng = np.random.default_rng(4)
    d = rng.random((9, 11))
    gx, gy = image_gradients(Raster(d))
    h, w = d.shape
    for v in range(h):
        for u in range(w):
            if u == 0:
                ex = d[v, 1] - d[v, 0]
            elif u == w - 1:
                ex = d[v, -1] - d[v, -2]
            else:
                ex = (d[v, u + 1] - d[v, u - 1]) / 2
            assert np.isclose(gx.data[v, u, 0], ex)
            if v == 0:
                ey = d[1, u] - d[0, u]
            elif v == h - 1:
                ey = d[-1, u] - d[-2, u]
            else:
                ey = (d[v + 1, u] - d[v - 1, u]) / 2
            assert np.isclose(gy.data[v, u, 0], ey)


def test_gradient_adjoint_is_true_adjoint():
    # <G d, w> == <d, G^T w> for random d, w
    rng = np.random.default_rng(5)
    d = rng.random((7, 8))
    wx = rng.random((7, 8))
    wy = rng.random((7, 8))
    gx, gy = image_gradients(Raster(d))
    lhs = (gx.data[:, :, 0] * wx).sum() + (gy.data[:, :, 0] * wy).sum()
    rhs = (d * gradient_adjoint(wx, wy)).sum()
    assert np.isclose(lhs, rhs)


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    data = (rng.integers(0, 256, size=(10, 12, 3)) / 255.0).astype(np.float32)
    r = Raster(data)
    save_png(tmp_path / "x.png", r)
    back = load_png(tmp_path / "x.png")
    assert np.array_equal(np.round(back.data * 255), np.round(r.data * 255))


def test_pfm_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    depth = Raster(rng.random((6, 5)).astype(np.float32) * 10, "depth")
    save_pfm(tmp_path / "d.pfm", depth)
    back = load_pfm(tmp_path / "d.pfm")
    assert np.array_equal(back.data, depth.data)
    flow = Raster(rng.normal(size=(6, 5, 2)).astype(np.float32), "flow")
    save_pfm(tmp_path / "f.pfm", flow)
    back = load_pfm(tmp_path / "f.pfm", "flow")
    assert np.array_equal(back.data, flow.data)
