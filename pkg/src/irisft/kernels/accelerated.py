"""Numba-compiled convolution kernels.

Direct (loop) convolutions with the same signatures as
:mod:`irisft.kernels.reference`.  Parallelism is over independent output
planes, so every output element is written by exactly one thread and
results are deterministic run to run (though not bitwise identical to the
numpy backend, which accumulates in a different order).
"""

import numpy as np
from numba import njit, prange


def _pad(x, pad):
    if pad:
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return x


@njit(parallel=True, cache=True)
def _fwd(xp, w, b, stride, y):
    n, cin, _, _ = xp.shape
    cout, _, kh, kw = w.shape
    ho, wo = y.shape[2], y.shape[3]
    for t in prange(n * cout):
        nn = t // cout
        co = t % cout
        for i in range(ho):
            for j in range(wo):
                y[nn, co, i, j] = b[co]
        for ci in range(cin):
            for u in range(kh):
                for v in range(kw):
                    wv = w[co, ci, u, v]
                    for i in range(ho):
                        ii = i * stride + u
                        for j in range(wo):
                            y[nn, co, i, j] += xp[nn, ci, ii, j * stride + v] * wv


@njit(parallel=True, cache=True)
def _input_grad(dy, w, stride, dxp):
    n, cout, ho, wo = dy.shape
    cin, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    for t in prange(n * cin):
        nn = t // cin
        ci = t % cin
        for co in range(cout):
            for u in range(kh):
                for v in range(kw):
                    wv = w[co, ci, u, v]
                    for i in range(ho):
                        ii = i * stride + u
                        for j in range(wo):
                            dxp[nn, ci, ii, j * stride + v] += dy[nn, co, i, j] * wv


@njit(parallel=True, cache=True)
def _weight_grad(xp, dy, stride, dw):
    n, cout, ho, wo = dy.shape
    cin, kh, kw = dw.shape[1], dw.shape[2], dw.shape[3]
    for t in prange(cout * cin):
        co = t // cin
        ci = t % cin
        for u in range(kh):
            for v in range(kw):
                acc = dw[co, ci, u, v]  # starts at 0, keeps dtype
                for nn in range(n):
                    for i in range(ho):
                        ii = i * stride + u
                        for j in range(wo):
                            acc += dy[nn, co, i, j] * xp[nn, ci, ii, j * stride + v]
                dw[co, ci, u, v] = acc


def conv2d_forward(x, w, b, stride=1, pad=0):
    n, _, h, w_in = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w_in + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv output would be empty for input {h}x{w_in}")
    y = np.empty((n, cout, ho, wo), dtype=x.dtype)
    _fwd(_pad(x, pad), w, b, stride, y)
    return y


def conv2d_input_grad(dy, w, stride, pad, in_hw):
    n = dy.shape[0]
    cin = w.shape[1]
    h, w_in = in_hw
    dxp = np.zeros((n, cin, h + 2 * pad, w_in + 2 * pad), dtype=dy.dtype)
    _input_grad(dy, w, stride, dxp)
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w_in].copy()
    return dxp


def conv2d_weight_grad(x, dy, stride, pad, k_hw):
    cout = dy.shape[1]
    cin = x.shape[1]
    kh, kw = k_hw
    dw = np.zeros((cout, cin, kh, kw), dtype=x.dtype)
    _weight_grad(_pad(x, pad), dy, stride, dw)
    return dw
