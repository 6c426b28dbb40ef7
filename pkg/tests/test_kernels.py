"""Both kernel backends against each other and against small loop oracles."""
import numpy as np
import pytest

from emac import kernels

from test_density import reference_kernel
from test_flow import brute_blockmatch


def loop_warp(field, flow):
    b, h, w = field.shape
    out = np.zeros_like(field)
    for k in range(b):
        for y in range(h):
            for x in range(w):
                sx, sy = x + flow[k, y, x, 0], y + flow[k, y, x, 1]
                x0, y0 = int(np.floor(sx)), int(np.floor(sy))
                fx, fy = sx - x0, sy - y0
                for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
                    for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                        if 0 <= yy < h and 0 <= xx < w:
                            out[k, y, x] += wy * wx * field[k, yy, xx]
    return out


def test_warp(backend, rng):
    field = rng.random((2, 6, 7))
    flow = rng.uniform(-3, 3, (2, 6, 7, 2))
    assert np.allclose(backend.warp_bilinear(field, flow), loop_warp(field, flow), atol=1e-14, rtol=0)


def test_warp_adjoint_is_transpose(backend, rng):
    flow = rng.uniform(-3, 3, (1, 5, 6, 2))
    x, y = rng.random((1, 5, 6)), rng.random((1, 5, 6))
    lhs = float((backend.warp_bilinear(x, flow) * y).sum())
    rhs = float((x * backend.warp_bilinear_adjoint(y, flow)).sum())
    assert abs(lhs - rhs) < 1e-12


def test_blockmatch(backend, rng):
    cur, prev = rng.integers(0, 4, (2, 18, 22)).astype(float)
    assert np.array_equal(backend.blockmatch(cur, prev, 6, 2, 6), brute_blockmatch(cur, prev, 6, 2))


def test_rasterize(backend, rng):
    pts = rng.uniform(0, 30, (4, 2))
    oracle = sum(reference_kernel(x, y, 30, 30, sigma=3.0) for x, y in pts)
    assert np.max(np.abs(backend.rasterize(pts, 30, 30, 3.0, 4.0) - oracle)) < 1e-14


@pytest.mark.skipif(len(kernels.backends()) < 2, reason="compiled backend not built")
def test_backends_agree(rng):
    py, cy = kernels.backends()["python"], kernels.backends()["cython"]
    field, flow = rng.random((3, 16, 16)), rng.uniform(-4, 4, (3, 16, 16, 2))
    assert np.array_equal(py.warp_bilinear(field, flow), cy.warp_bilinear(field, flow))
    assert np.allclose(py.warp_bilinear_adjoint(field, flow), cy.warp_bilinear_adjoint(field, flow), atol=1e-14, rtol=0)
    a, b = rng.random((32, 32)), rng.random((32, 32))
    assert np.array_equal(py.blockmatch(a, b, 8, 4, 8), cy.blockmatch(a, b, 8, 4, 8))
    pts = rng.uniform(0, 64, (20, 2))
    assert np.allclose(py.rasterize(pts, 64, 64, 6.0, 4.0), cy.rasterize(pts, 64, 64, 6.0, 4.0), atol=1e-15, rtol=0)


def test_selected_backend_reported():
    assert kernels.BACKEND in kernels.backends()
