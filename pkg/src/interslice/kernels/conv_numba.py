"""Loop-kernel convolution backend.

Each prange block owns a disjoint output slab and accumulates in a fixed
order, so results are deterministic run to run regardless of thread count.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=True, cache=True)
def _conv2d_forward(x, w, b, stride, pad, dilation):
    n, cin, h, width = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (width + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    y = np.empty((n, cout, ho, wo), dtype=x.dtype)
    for idx in prange(n * cout):
        ni = idx // cout
        co = idx % cout
        for i in range(ho):
            hbase = i * stride - pad
            for j in range(wo):
                wbase = j * stride - pad
                acc = 0.0
                for ci in range(cin):
                    for p in range(kh):
                        hi = hbase + p * dilation
                        if hi < 0 or hi >= h:
                            continue
                        for q in range(kw):
                            wi = wbase + q * dilation
                            if wi < 0 or wi >= width:
                                continue
                            acc += x[ni, ci, hi, wi] * w[co, ci, p, q]
                y[ni, co, i, j] = acc + b[co]
    return y


@njit(parallel=True, fastmath=True, cache=True)
def _conv2d_backward_input(gy, w, stride, pad, dilation, in_h, in_w):
    n, cout, ho, wo = gy.shape
    _, cin, kh, kw = w.shape
    gx = np.empty((n, cin, in_h, in_w), dtype=gy.dtype)
    for idx in prange(n * cin):
        ni = idx // cin
        ci = idx % cin
        for hi in range(in_h):
            for wi in range(in_w):
                acc = 0.0
                for p in range(kh):
                    th = hi + pad - p * dilation
                    if th < 0 or th % stride != 0:
                        continue
                    i = th // stride
                    if i >= ho:
                        continue
                    for q in range(kw):
                        tw = wi + pad - q * dilation
                        if tw < 0 or tw % stride != 0:
                            continue
                        j = tw // stride
                        if j >= wo:
                            continue
                        for co in range(cout):
                            acc += gy[ni, co, i, j] * w[co, ci, p, q]
                gx[ni, ci, hi, wi] = acc
    return gx


@njit(parallel=True, fastmath=True, cache=True)
def _conv2d_backward_weight(x, gy, stride, pad, dilation, kh, kw):
    n, cin, h, width = x.shape
    _, cout, ho, wo = gy.shape
    gw = np.empty((cout, cin, kh, kw), dtype=x.dtype)
    for co in prange(cout):
        for ci in range(cin):
            for p in range(kh):
                for q in range(kw):
                    acc = 0.0
                    for ni in range(n):
                        for i in range(ho):
                            hi = i * stride - pad + p * dilation
                            if hi < 0 or hi >= h:
                                continue
                            for j in range(wo):
                                wi = j * stride - pad + q * dilation
                                if wi < 0 or wi >= width:
                                    continue
                                acc += x[ni, ci, hi, wi] * gy[ni, co, i, j]
                    gw[co, ci, p, q] = acc
    return gw


def conv2d_forward(x, w, b, stride, pad, dilation):
    if b is None:
        b = np.zeros(w.shape[0], dtype=x.dtype)
    return _conv2d_forward(x, w, b, stride, pad, dilation)


def conv2d_backward_input(gy, w, stride, pad, dilation, in_h, in_w):
    return _conv2d_backward_input(gy, w, stride, pad, dilation, in_h, in_w)


def conv2d_backward_weight(x, gy, stride, pad, dilation, kh, kw):
    return _conv2d_backward_weight(x, gy, stride, pad, dilation, kh, kw)
