"""Pure-numpy convolution kernels (im2col + BLAS matmul).

Fallback backend used when numba is unavailable or when
``IRISFT_BACKEND=numpy`` is set.  Array layout is NCHW throughout and all
functions are dtype-generic (training runs float32, gradient checks run
float64).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_hw(h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv output would be empty for input {h}x{w}")
    return ho, wo


def _im2col(x, kh, kw, stride, pad):
    # returns (N*Ho*Wo, Cin*kh*kw) with rows ordered n-major, then i, then j
    n, cin, h, w = x.shape
    ho, wo = _out_hw(h, w, kh, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (N, Cin, Ho, Wo, kh, kw) -> (N, Ho, Wo, Cin, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlate x (N,Cin,H,W) with w (Cout,Cin,kh,kw), add bias."""
    n = x.shape[0]
    cout, cin, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    y = cols @ w.reshape(cout, cin * kh * kw).T
    y += b
    return y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2).copy()


def conv2d_input_grad(dy, w, stride, pad, in_hw):
    """Gradient of the forward output w.r.t. its input x."""
    n, cout, ho, wo = dy.shape
    _, cin, kh, kw = w.shape
    h, w_in = in_hw
    dy_cols = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    dcols = dy_cols @ w.reshape(cout, cin * kh * kw)
    dcols = dcols.reshape(n, ho, wo, cin, kh, kw)
    hp, wp = h + 2 * pad, w_in + 2 * pad
    dxp = np.zeros((n, cin, hp, wp), dtype=dy.dtype)
    s = stride
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u:u + s * ho:s, v:v + s * wo:s] += (
                dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2))
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w_in].copy()
    return dxp


def conv2d_weight_grad(x, dy, stride, pad, k_hw):
    """Gradient of the forward output w.r.t. the kernel weights."""
    n, cout, ho, wo = dy.shape
    cin = x.shape[1]
    kh, kw = k_hw
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    dy_cols = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    dw = dy_cols.T @ cols
    return dw.reshape(cout, cin, kh, kw)
