"""Pure numpy implementations of the compiled kernels.

Results agree with the compiled backend to rounding; summation order inside
BLAS calls is not pinned, so the two backends are not bit-identical.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def matmul(a, b):
    return np.matmul(a, b)


def _windows(x, kh, kw, stride):
    # (N, C, Ho, Wo, kh, kw)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, w, stride):
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(x, kh, kw, stride)
    return np.einsum("nchwij,fcij->nfhw", win, w, optimize=True)


def conv2d_backward(x, w, dout, stride):
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = dout.shape[2], dout.shape[3]
    win = _windows(x, kh, kw, stride)
    dw = np.einsum("nfhw,nchwij->fcij", dout, win, optimize=True)
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("nfhw,fc->nchw", dout, w[:, :, i, j], optimize=True)
            dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib
    return dx, dw


def round_half_away(v):
    r = np.trunc(v)
    frac = v - r
    return r + (frac >= 0.5) - (frac <= -0.5)


def fake_quant(x, scale, qmin, qmax):
    k = round_half_away(x / scale)
    mask = (k >= qmin) & (k <= qmax)
    return np.clip(k, qmin, qmax) * scale, mask
