"""Pure-numpy reference kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
Inputs are C-contiguous float64 arrays; 2-D kernels operate row-wise on the
last axis.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def softmax_forward(x, mask=None):
    """Row-wise softmax of a 2-D array; ``mask`` (uint8, same shape) zeros keys."""
    if mask is not None:
        x = np.where(mask.astype(bool), x, -np.inf)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layer_norm_forward(x, gain, bias, eps):
    """Returns (out, xhat, inv_std) for a 2-D input normalised per row."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0]


def layer_norm_backward(gy, xhat, inv_std, gain):
    """Returns (gx, ggain, gbias)."""
    n = xhat.shape[1]
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    gxhat = gy * gain
    a = gxhat.sum(axis=1, keepdims=True)
    b = (gxhat * xhat).sum(axis=1, keepdims=True)
    gx = (inv_std[:, None] / n) * (n * gxhat - a - xhat * b)
    return gx, ggain, gbias


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_backward(x, gy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)


def average_ranks(x):
    """0-based ranks of a 1-D array with ties sharing their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    if n == 0:
        return np.empty(0, dtype=np.float64)
    starts = np.flatnonzero(np.concatenate(([True], xs[1:] != xs[:-1])))
    counts = np.diff(np.append(starts, n))
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(starts + 0.5 * (counts - 1), counts)
    return ranks
