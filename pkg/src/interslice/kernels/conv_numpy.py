"""im2col / col2im convolution kernels on top of BLAS matmul."""

import numpy as np


def _out_size(size, k, stride, pad, dilation):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _im2col(x, kh, kw, stride, pad, dilation, ho, wo):
    n, cin, h, w = x.shape
    if pad > 0:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    cols = np.empty((n, cin * kh * kw, ho * wo), dtype=x.dtype)
    r = 0
    for ci in range(cin):
        for i in range(kh):
            hi = i * dilation
            for j in range(kw):
                wi = j * dilation
                patch = xp[:, ci, hi : hi + (ho - 1) * stride + 1 : stride,
                           wi : wi + (wo - 1) * stride + 1 : stride]
                cols[:, r, :] = patch.reshape(n, -1)
                r += 1
    return cols


def conv2d_forward(x, w, b, stride, pad, dilation):
    n, cin, h, width = x.shape
    cout, _, kh, kw = w.shape
    ho = _out_size(h, kh, stride, pad, dilation)
    wo = _out_size(width, kw, stride, pad, dilation)
    cols = _im2col(x, kh, kw, stride, pad, dilation, ho, wo)
    y = np.matmul(w.reshape(cout, -1), cols).reshape(n, cout, ho, wo)
    if b is not None:
        y += b.reshape(1, -1, 1, 1)
    return y


def conv2d_backward_input(gy, w, stride, pad, dilation, in_h, in_w):
    n, cout, ho, wo = gy.shape
    _, cin, kh, kw = w.shape
    gcols = np.matmul(w.reshape(cout, -1).T, gy.reshape(n, cout, ho * wo))
    gxp = np.zeros((n, cin, in_h + 2 * pad, in_w + 2 * pad), dtype=gy.dtype)
    r = 0
    for ci in range(cin):
        for i in range(kh):
            hi = i * dilation
            for j in range(kw):
                wi = j * dilation
                gxp[:, ci, hi : hi + (ho - 1) * stride + 1 : stride,
                    wi : wi + (wo - 1) * stride + 1 : stride] += gcols[:, r, :].reshape(n, ho, wo)
                r += 1
    if pad > 0:
        return gxp[:, :, pad : pad + in_h, pad : pad + in_w].copy()
    return gxp


def conv2d_backward_weight(x, gy, stride, pad, dilation, kh, kw):
    n, cin, h, w = x.shape
    _, cout, ho, wo = gy.shape
    cols = _im2col(x, kh, kw, stride, pad, dilation, ho, wo)
    # (cout, n*p) @ (n*p, cin*kh*kw)
    gy2 = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
    cols2 = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(cin * kh * kw, n * ho * wo)
    gw = np.matmul(gy2, cols2.T).reshape(cout, cin, kh, kw)
    return gw
