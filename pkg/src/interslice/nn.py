"""Minimal convolutional network stack with explicit backprop.

Layers keep a LIFO stack of forward caches, so a module can run several
forward passes (shared encoder on left/right inputs, decoder at several
ratios) before the matching backward passes pop them in reverse order.
Backward returns the input gradient and accumulates parameter gradients
in place until zero_grad().
"""

import numpy as np

from . import kernels
from .errors import ShapeError


class Parameter:
    __slots__ = ("name", "data", "grad")

    def __init__(self, name, data):
        self.name = name
        self.data = data
        self.grad = np.zeros_like(data)

    def zero_grad(self):
        self.grad[...] = 0.0


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    def params(self):
        return []

    def children(self):
        return []

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def clear_caches(self):
        self._clear_own()
        for c in self.children():
            c.clear_caches()

    def _clear_own(self):
        pass

    def forward(self, x):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Layer):
    def __init__(self, cin, cout, k, stride=1, pad=None, dilation=1, rng=None,
                 dtype=np.float64, name="conv"):
        self.cin, self.cout, self.k = cin, cout, k
        self.stride = stride
        self.pad = (dilation * (k - 1)) // 2 if pad is None else pad
        self.dilation = dilation
        w = he_normal(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.w = Parameter(f"{name}.w", w)
        self.b = Parameter(f"{name}.b", np.zeros(cout, dtype=dtype))
        self._xs = []

    def params(self):
        return [self.w, self.b]

    def _clear_own(self):
        self._xs.clear()

    def forward(self, x):
        if x.shape[1] != self.cin:
            raise ShapeError(f"{self.w.name}: expected {self.cin} input channels, got {x.shape[1]}")
        self._xs.append(x)
        return kernels.conv2d_forward(x, self.w.data, self.b.data,
                                      self.stride, self.pad, self.dilation)

    def backward(self, gy):
        x = self._xs.pop()
        self.w.grad += kernels.conv2d_backward_weight(x, gy, self.stride, self.pad,
                                                      self.dilation, self.k, self.k)
        self.b.grad += gy.sum(axis=(0, 2, 3))
        return kernels.conv2d_backward_input(gy, self.w.data, self.stride, self.pad,
                                             self.dilation, x.shape[2], x.shape[3])


class ConvTranspose2d(Layer):
    """Stride-s upsampling conv; forward is the adjoint of a strided Conv2d."""

    def __init__(self, cin, cout, k=4, stride=2, pad=1, rng=None,
                 dtype=np.float64, name="tconv"):
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.pad = stride, pad
        # weight laid out as the underlying conv sees it: (cin, cout, k, k)
        w = he_normal(rng, (cin, cout, k, k), cin * k * k, dtype)
        self.w = Parameter(f"{name}.w", w)
        self.b = Parameter(f"{name}.b", np.zeros(cout, dtype=dtype))
        self._xs = []

    def params(self):
        return [self.w, self.b]

    def _clear_own(self):
        self._xs.clear()

    def out_size(self, size):
        return (size - 1) * self.stride - 2 * self.pad + self.k

    def forward(self, x):
        if x.shape[1] != self.cin:
            raise ShapeError(f"{self.w.name}: expected {self.cin} input channels, got {x.shape[1]}")
        self._xs.append(x)
        oh, ow = self.out_size(x.shape[2]), self.out_size(x.shape[3])
        y = kernels.conv2d_backward_input(x, self.w.data, self.stride, self.pad, 1, oh, ow)
        y += self.b.data.reshape(1, -1, 1, 1)
        return y

    def backward(self, gy):
        x = self._xs.pop()
        self.w.grad += kernels.conv2d_backward_weight(gy, x, self.stride, self.pad,
                                                      1, self.k, self.k)
        self.b.grad += gy.sum(axis=(0, 2, 3))
        return kernels.conv2d_forward(gy, self.w.data, None, self.stride, self.pad, 1)


class LeakyReLU(Layer):
    def __init__(self, alpha=0.2):
        self.alpha = alpha
        self._masks = []

    def _clear_own(self):
        self._masks.clear()

    def forward(self, x):
        mask = x >= 0
        self._masks.append(mask)
        return np.where(mask, x, self.alpha * x)

    def backward(self, gy):
        mask = self._masks.pop()
        return np.where(mask, gy, self.alpha * gy)


class ReLU(LeakyReLU):
    def __init__(self):
        super().__init__(alpha=0.0)


class Tanh(Layer):
    def __init__(self):
        self._ys = []

    def _clear_own(self):
        self._ys.clear()

    def forward(self, x):
        y = np.tanh(x)
        self._ys.append(y)
        return y

    def backward(self, gy):
        y = self._ys.pop()
        return gy * (1.0 - y * y)


class Sigmoid(Layer):
    def __init__(self):
        self._ys = []

    def _clear_own(self):
        self._ys.clear()

    def forward(self, x):
        y = sigmoid(x)
        self._ys.append(y)
        return y

    def backward(self, gy):
        y = self._ys.pop()
        return gy * y * (1.0 - y)


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def params(self):
        out = []
        for l in self.layers:
            out.extend(l.params())
        return out

    def children(self):
        return self.layers

    def forward(self, x):
        for l in self.layers:
            x = l.forward(x)
        return x

    def backward(self, gy):
        for l in reversed(self.layers):
            gy = l.backward(gy)
        return gy


class ResidualBlock(Layer):
    """conv3x3(stride) -> lrelu -> conv3x3 -> + shortcut -> lrelu."""

    def __init__(self, cin, cout, stride=1, rng=None, dtype=np.float64, name="res"):
        self.conv1 = Conv2d(cin, cout, 3, stride=stride, rng=rng, dtype=dtype, name=f"{name}.conv1")
        self.act1 = LeakyReLU()
        self.conv2 = Conv2d(cout, cout, 3, rng=rng, dtype=dtype, name=f"{name}.conv2")
        if stride != 1 or cin != cout:
            self.shortcut = Conv2d(cin, cout, 1, stride=stride, pad=0, rng=rng,
                                   dtype=dtype, name=f"{name}.skip")
        else:
            self.shortcut = None
        self.act2 = LeakyReLU()

    def params(self):
        out = self.conv1.params() + self.conv2.params()
        if self.shortcut is not None:
            out += self.shortcut.params()
        return out

    def children(self):
        out = [self.conv1, self.act1, self.conv2, self.act2]
        if self.shortcut is not None:
            out.append(self.shortcut)
        return out

    def forward(self, x):
        h = self.conv2.forward(self.act1.forward(self.conv1.forward(x)))
        s = x if self.shortcut is None else self.shortcut.forward(x)
        return self.act2.forward(h + s)

    def backward(self, gy):
        g = self.act2.backward(gy)
        gx_main = self.conv1.backward(self.act1.backward(self.conv2.backward(g)))
        gx_skip = g if self.shortcut is None else self.shortcut.backward(g)
        return gx_main + gx_skip


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis=1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs, gprobs, axis=1):
    dot = (gprobs * probs).sum(axis=axis, keepdims=True)
    return probs * (gprobs - dot)


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def collect_state(params):
    """Snapshot parameter arrays by name (insertion order preserved)."""
    return {p.name: p.data.copy() for p in params}


def load_state(params, state):
    for p in params:
        if p.name not in state:
            raise ShapeError(f"missing parameter {p.name} in state")
        if state[p.name].shape != p.data.shape:
            raise ShapeError(f"shape mismatch for {p.name}: "
                             f"{state[p.name].shape} vs {p.data.shape}")
        p.data[...] = state[p.name].astype(p.data.dtype)
