"""Hot array kernels: 2-D convolution forward/backward in two backends.

All network layers funnel through the three primitives in this module, so
the numpy/numba choice made in :mod:`interslice.backend` applies uniformly.
Signatures are shared; outputs agree to floating-point accumulation order
(the parity tests pin this).
"""

from .. import backend as _backend
from . import conv_numpy as _np_impl

try:
    from . import conv_numba as _nb_impl
except ImportError:
    _nb_impl = None


def _impl():
    if _backend.get_backend() == "numba":
        return _nb_impl
    return _np_impl


def conv2d_forward(x, w, b, stride=1, pad=0, dilation=1):
    """y[n,co,ho,wo] = sum_ci,kh,kw x[n,ci,ho*s-p+kh*d, wo*s-p+kw*d] * w[co,ci,kh,kw] + b[co]"""
    return _impl().conv2d_forward(x, w, b, stride, pad, dilation)


def conv2d_backward_input(gy, w, stride, pad, dilation, in_h, in_w):
    """Gradient of conv2d_forward w.r.t. its input, for a given output gradient."""
    return _impl().conv2d_backward_input(gy, w, stride, pad, dilation, in_h, in_w)


def conv2d_backward_weight(x, gy, stride, pad, dilation, kh, kw):
    """Gradient of conv2d_forward w.r.t. the weight tensor."""
    return _impl().conv2d_backward_weight(x, gy, stride, pad, dilation, kh, kw)


def conv_output_size(size, k, stride, pad, dilation=1):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1
