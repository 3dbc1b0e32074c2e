"""Reference numpy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable, and as the
comparison baseline in tests and benchmarks. Signatures match the Cython
module exactly; all arrays are C-contiguous float64.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _windows(x, k, stride):
    return sliding_window_view(x, k, axis=1)[:, ::stride, :]


def conv1d_forward(x, w, stride):
    return np.ascontiguousarray(np.tensordot(w, _windows(x, w.shape[2], stride), axes=([1, 2], [0, 2])))


def conv1d_backward(x, w, gout, stride):
    k = w.shape[2]
    n_out = gout.shape[1]
    gw = np.tensordot(gout, _windows(x, k, stride), axes=([1], [1]))
    cols = np.tensordot(w, gout, axes=([0], [0]))  # (c_in, k, n_out)
    gx = np.zeros_like(x)
    span = stride * (n_out - 1) + 1
    for j in range(k):
        gx[:, j:j + span:stride] += cols[:, j, :]
    return gx, np.ascontiguousarray(gw)


def gelu_forward(x):
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def gelu_backward(x, gout):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return gout * (cdf + x * pdf)


def layer_norm_forward(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0].copy()


def layer_norm_backward(gout, xhat, rstd, gain):
    gxhat = gout * gain
    d = xhat.shape[1]
    gx = rstd[:, None] * (
        gxhat
        - gxhat.sum(axis=1, keepdims=True) / d
        - xhat * (gxhat * xhat).sum(axis=1, keepdims=True) / d
    )
    return gx, (gout * xhat).sum(axis=0), gout.sum(axis=0)


def softmax_forward(x):
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def softmax_backward(y, gout):
    return y * (gout - (gout * y).sum(axis=1, keepdims=True))
