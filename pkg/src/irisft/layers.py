"""Minimal trainable layers with manual backprop.

Each layer caches what its backward pass needs during forward.  Gradients
are overwritten (not accumulated) on every backward call and consumed by
``step``; a layer whose gradient is None is skipped by the optimizer.
"""

from typing import Optional

import numpy as np

from . import kernels


class Conv2d:
    """2-D convolution (cross-correlation) with bias."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1,
                 pad: int = 0, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        std = np.sqrt(2.0 / (cin * k * k))  # He init, fan-in
        self.w = rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype)
        self.b = np.zeros(cout, dtype=dtype)
        self.stride = stride
        self.pad = pad
        self.gw = None
        self.gb = None
        self._vw = None
        self._vb = None
        self._x = None

    def forward(self, x):
        self._x = x
        return kernels.conv2d_forward(x, self.w, self.b, self.stride, self.pad)

    def backward(self, dy):
        k = self.w.shape[2], self.w.shape[3]
        self.gw = kernels.conv2d_weight_grad(self._x, dy, self.stride,
                                             self.pad, k)
        self.gb = dy.sum(axis=(0, 2, 3))
        return kernels.conv2d_input_grad(dy, self.w, self.stride, self.pad,
                                         self._x.shape[2:])

    def step(self, lr: float, momentum: float = 0.0):
        if self.gw is None:
            return
        if momentum > 0.0:
            if self._vw is None:
                self._vw = np.zeros_like(self.w)
                self._vb = np.zeros_like(self.b)
            self._vw = momentum * self._vw + self.gw
            self._vb = momentum * self._vb + self.gb
            self.w -= lr * self._vw
            self.b -= lr * self._vb
        else:
            self.w -= lr * self.gw
            self.b -= lr * self.gb
        self.gw = None
        self.gb = None

    @property
    def num_parameters(self) -> int:
        return self.w.size + self.b.size


class GroupNorm:
    """Group normalization with per-channel affine parameters.

    Statistics are computed per (sample, group) over the group's channels
    and all spatial positions, so behavior does not depend on batch size
    and is identical in training and inference.
    """

    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5,
                 dtype=np.float32):
        if channels % groups != 0:
            raise ValueError(f"channels {channels} not divisible by "
                             f"groups {groups}")
        self.channels = channels
        self.groups = groups
        self.eps = eps
        self.g = np.ones(channels, dtype=dtype)
        self.b = np.zeros(channels, dtype=dtype)
        self.gg = None
        self.gb = None
        self._vg = None
        self._vb = None
        self._xhat = None
        self._inv_std = None

    def forward(self, x):
        n, c, h, w = x.shape
        grouped = x.reshape(n, self.groups, -1)
        mean = grouped.mean(axis=2, keepdims=True)
        var = grouped.var(axis=2, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = ((grouped - mean) * inv_std).reshape(n, c, h, w)
        self._xhat = xhat
        self._inv_std = inv_std
        return self.g[None, :, None, None] * xhat + self.b[None, :, None, None]

    def backward(self, dy):
        n, c, h, w = dy.shape
        self.gg = (dy * self._xhat).sum(axis=(0, 2, 3))
        self.gb = dy.sum(axis=(0, 2, 3))
        dxhat = (dy * self.g[None, :, None, None]).reshape(n, self.groups, -1)
        xhat = self._xhat.reshape(n, self.groups, -1)
        m1 = dxhat.mean(axis=2, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=2, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * self._inv_std
        return dx.reshape(n, c, h, w).astype(dy.dtype, copy=False)

    def step(self, lr: float, momentum: float = 0.0):
        if self.gg is None:
            return
        if momentum > 0.0:
            if self._vg is None:
                self._vg = np.zeros_like(self.g)
                self._vb = np.zeros_like(self.b)
            self._vg = momentum * self._vg + self.gg
            self._vb = momentum * self._vb + self.gb
            self.g -= lr * self._vg
            self.b -= lr * self._vb
        else:
            self.g -= lr * self.gg
            self.b -= lr * self.gb
        self.gg = None
        self.gb = None

    @property
    def num_parameters(self) -> int:
        return self.g.size + self.b.size


class LeakyReLU:
    """Elementwise x if x > 0 else slope * x; one instance per call site.

    The small negative slope keeps gradients alive everywhere, which
    matters a lot for a network this small: with a hard zero the whole
    decoder can die in a handful of large SGD steps.
    """

    def __init__(self, slope: float = 0.01):
        self.slope = slope
        self._m = None

    def forward(self, x):
        self._m = x > 0
        return np.where(self._m, x, self.slope * x)

    def backward(self, dy):
        return np.where(self._m, dy, self.slope * dy)


def upsample2x(x):
    """Nearest-neighbour 2x spatial upsampling of an NCHW tensor."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(dy):
    """Backward of upsample2x: sum gradients over each 2x2 block."""
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
