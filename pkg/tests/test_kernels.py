"""Convolution kernels: finite-difference oracles and backend parity."""

import numpy as np
import pytest

from interslice import backend, kernels

SHAPES = [
    # (n, cin, cout, h, w, k, stride, pad, dilation)
    (2, 3, 4, 8, 8, 3, 1, 1, 1),
    (2, 2, 5, 9, 7, 3, 2, 1, 1),
    (1, 4, 3, 8, 8, 4, 2, 1, 1),
    (2, 1, 2, 12, 12, 7, 2, 3, 1),
    (1, 3, 3, 10, 10, 3, 1, 2, 2),
    (2, 2, 2, 6, 6, 1, 1, 0, 1),
]


def _rand_case(case, seed=0):
    n, cin, cout, h, w, k, stride, pad, dil = case
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, cin, h, w))
    wt = rng.standard_normal((cout, cin, k, k))
    b = rng.standard_normal(cout)
    return x, wt, b, stride, pad, dil


@pytest.mark.parametrize("case", SHAPES)
def test_forward_matches_direct_sum(case):
    x, wt, b, stride, pad, dil = _rand_case(case)
    y = kernels.conv2d_forward(x, wt, b, stride, pad, dil)
    n, cin, h, w = x.shape
    cout, _, k, _ = wt.shape
    ho = kernels.conv_output_size(h, k, stride, pad, dil)
    wo = kernels.conv_output_size(w, k, stride, pad, dil)
    assert y.shape == (n, cout, ho, wo)
    # direct quadruple-loop evaluation at a handful of positions
    rng = np.random.default_rng(1)
    for _ in range(10):
        ni, co = rng.integers(n), rng.integers(cout)
        i, j = rng.integers(ho), rng.integers(wo)
        acc = b[co]
        for ci in range(cin):
            for p in range(k):
                for q in range(k):
                    hi = i * stride - pad + p * dil
                    wi = j * stride - pad + q * dil
                    if 0 <= hi < h and 0 <= wi < w:
                        acc += x[ni, ci, hi, wi] * wt[co, ci, p, q]
        assert abs(y[ni, co, i, j] - acc) < 1e-10


@pytest.mark.parametrize("case", SHAPES)
def test_backward_input_matches_finite_differences(case):
    x, wt, b, stride, pad, dil = _rand_case(case)
    y = kernels.conv2d_forward(x, wt, b, stride, pad, dil)
    gy = np.random.default_rng(2).standard_normal(y.shape)
    gx = kernels.conv2d_backward_input(gy, wt, stride, pad, dil, x.shape[2], x.shape[3])
    assert gx.shape == x.shape
    rng = np.random.default_rng(3)
    eps = 1e-6
    for _ in range(12):
        idx = tuple(rng.integers(s) for s in x.shape)
        xp = x.copy(); xp[idx] += eps
        xm = x.copy(); xm[idx] -= eps
        yp = kernels.conv2d_forward(xp, wt, b, stride, pad, dil)
        ym = kernels.conv2d_forward(xm, wt, b, stride, pad, dil)
        fd = ((yp - ym) * gy).sum() / (2 * eps)
        assert abs(gx[idx] - fd) < 1e-6 * max(1.0, abs(fd))


@pytest.mark.parametrize("case", SHAPES)
def test_backward_weight_matches_finite_differences(case):
    x, wt, b, stride, pad, dil = _rand_case(case)
    y = kernels.conv2d_forward(x, wt, b, stride, pad, dil)
    gy = np.random.default_rng(4).standard_normal(y.shape)
    gw = kernels.conv2d_backward_weight(x, gy, stride, pad, dil, wt.shape[2], wt.shape[3])
    assert gw.shape == wt.shape
    rng = np.random.default_rng(5)
    eps = 1e-6
    for _ in range(12):
        idx = tuple(rng.integers(s) for s in wt.shape)
        wp = wt.copy(); wp[idx] += eps
        wm = wt.copy(); wm[idx] -= eps
        yp = kernels.conv2d_forward(x, wp, b, stride, pad, dil)
        ym = kernels.conv2d_forward(x, wm, b, stride, pad, dil)
        fd = ((yp - ym) * gy).sum() / (2 * eps)
        assert abs(gw[idx] - fd) < 1e-6 * max(1.0, abs(fd))


@pytest.mark.skipif(not backend.numba_available(), reason="numba not installed")
@pytest.mark.parametrize("case", SHAPES)
def test_backend_parity(case):
    x, wt, b, stride, pad, dil = _rand_case(case, seed=7)
    prev = backend.set_backend("numpy")
    try:
        y_np = kernels.conv2d_forward(x, wt, b, stride, pad, dil)
        gy = np.random.default_rng(8).standard_normal(y_np.shape)
        gx_np = kernels.conv2d_backward_input(gy, wt, stride, pad, dil, x.shape[2], x.shape[3])
        gw_np = kernels.conv2d_backward_weight(x, gy, stride, pad, dil, wt.shape[2], wt.shape[3])
        backend.set_backend("numba")
        y_nb = kernels.conv2d_forward(x, wt, b, stride, pad, dil)
        gx_nb = kernels.conv2d_backward_input(gy, wt, stride, pad, dil, x.shape[2], x.shape[3])
        gw_nb = kernels.conv2d_backward_weight(x, gy, stride, pad, dil, wt.shape[2], wt.shape[3])
    finally:
        backend.set_backend(prev)
    np.testing.assert_allclose(y_np, y_nb, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(gx_np, gx_nb, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(gw_np, gw_nb, rtol=1e-10, atol=1e-10)


@pytest.mark.skipif(not backend.numba_available(), reason="numba not installed")
def test_numba_kernels_are_run_deterministic():
    x, wt, b, stride, pad, dil = _rand_case(SHAPES[1], seed=9)
    prev = backend.set_backend("numba")
    try:
        y1 = kernels.conv2d_forward(x, wt, b, stride, pad, dil)
        y2 = kernels.conv2d_forward(x, wt, b, stride, pad, dil)
    finally:
        backend.set_backend(prev)
    assert np.array_equal(y1, y2)
