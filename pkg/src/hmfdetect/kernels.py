"""Hot numeric kernels for the convolutional model.

Every kernel has two implementations with identical signatures: a numba
``@njit`` loop nest and a vectorised pure-numpy version.  The public names
(``conv2d_forward`` and friends) are bound at import time:

* ``HMFDETECT_NUMBA=0`` (or ``false``/``no``/``off``) selects numpy;
* otherwise numba is used when it can be imported.

Arrays are NHWC float64.  Both paths accumulate in a fixed order, so a given
path is bit-reproducible run to run; the two paths agree to rounding only.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_FLAG = os.environ.get("HMFDETECT_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


def conv_output_side(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# numpy implementations


def _im2col(x, k, stride, pad):
    n, h, w, c = x.shape
    ho = conv_output_side(h, k, stride, pad)
    wo = conv_output_side(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, : ho * stride : stride, : wo * stride : stride]
    # (N, Ho, Wo, C, K, K) -> (N, Ho, Wo, K, K, C) to match the weight layout
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)
    return cols, ho, wo


def conv2d_forward_numpy(x, w, b, stride, pad):
    k, _, _, f = w.shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = cols @ w.reshape(-1, f) + b
    return out.reshape(x.shape[0], ho, wo, f)


def conv2d_backward_numpy(x, w, dout, stride, pad):
    n, h, wd, c = x.shape
    k, _, _, f = w.shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    d2 = dout.reshape(-1, f)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(-1, f).T).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c))
    for ky in range(k):
        for kx in range(k):
            dxp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :] += dcols[:, :, :, ky, kx, :]
    dx = dxp[:, pad : pad + h, pad : pad + wd, :]
    return np.ascontiguousarray(dx), dw, db


def maxpool_forward_numpy(x, k):
    n, h, w, c = x.shape
    ho, wo = h // k, w // k
    blocks = x[:, : ho * k, : wo * k, :].reshape(n, ho, k, wo, k, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, ho, wo, c, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward_numpy(dout, arg, x_shape, k):
    n, h, w, c = x_shape
    ho, wo = arg.shape[1], arg.shape[2]
    onehot = np.zeros((n, ho, wo, c, k * k))
    np.put_along_axis(onehot, arg[..., None], dout[..., None], axis=-1)
    grads = onehot.reshape(n, ho, wo, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * k, wo * k, c)
    dx = np.zeros(x_shape)
    dx[:, : ho * k, : wo * k, :] = grads
    return dx


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True)
    def _conv2d_forward_nb(x, w, b, stride, pad):
        n, h, wd, c = x.shape
        k = w.shape[0]
        f = w.shape[3]
        ho = (h + 2 * pad - k) // stride + 1
        wo = (wd + 2 * pad - k) // stride + 1
        out = np.empty((n, ho, wo, f))
        for i in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    for q in range(f):
                        out[i, oy, ox, q] = b[q]
                    for ky in range(k):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(k):
                            ix = ox * stride - pad + kx
                            if ix < 0 or ix >= wd:
                                continue
                            for ch in range(c):
                                xv = x[i, iy, ix, ch]
                                for q in range(f):
                                    out[i, oy, ox, q] += xv * w[ky, kx, ch, q]
        return out

    @njit(cache=True)
    def _conv2d_backward_nb(x, w, dout, stride, pad):
        n, h, wd, c = x.shape
        k = w.shape[0]
        f = w.shape[3]
        ho = dout.shape[1]
        wo = dout.shape[2]
        dx = np.zeros(x.shape)
        dw = np.zeros(w.shape)
        db = np.zeros(f)
        for i in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    for q in range(f):
                        db[q] += dout[i, oy, ox, q]
                    for ky in range(k):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(k):
                            ix = ox * stride - pad + kx
                            if ix < 0 or ix >= wd:
                                continue
                            for ch in range(c):
                                xv = x[i, iy, ix, ch]
                                acc = 0.0
                                for q in range(f):
                                    g = dout[i, oy, ox, q]
                                    dw[ky, kx, ch, q] += xv * g
                                    acc += w[ky, kx, ch, q] * g
                                dx[i, iy, ix, ch] += acc
        return dx, dw, db

    @njit(cache=True)
    def _maxpool_forward_nb(x, k):
        n, h, w, c = x.shape
        ho = h // k
        wo = w // k
        out = np.empty((n, ho, wo, c))
        arg = np.empty((n, ho, wo, c), dtype=np.int64)
        for i in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    for ch in range(c):
                        best = x[i, oy * k, ox * k, ch]
                        bi = 0
                        for dy in range(k):
                            for dx in range(k):
                                v = x[i, oy * k + dy, ox * k + dx, ch]
                                if v > best:
                                    best = v
                                    bi = dy * k + dx
                        out[i, oy, ox, ch] = best
                        arg[i, oy, ox, ch] = bi
        return out, arg

    @njit(cache=True)
    def _maxpool_backward_nb(dout, arg, dx, k):
        n, ho, wo, c = dout.shape
        for i in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    for ch in range(c):
                        a = arg[i, oy, ox, ch]
                        dx[i, oy * k + a // k, ox * k + a % k, ch] += dout[i, oy, ox, ch]
        return dx

    def conv2d_forward_numba(x, w, b, stride, pad):
        return _conv2d_forward_nb(x, w, b, stride, pad)

    def conv2d_backward_numba(x, w, dout, stride, pad):
        return _conv2d_backward_nb(x, w, np.ascontiguousarray(dout), stride, pad)

    def maxpool_forward_numba(x, k):
        return _maxpool_forward_nb(x, k)

    def maxpool_backward_numba(dout, arg, x_shape, k):
        return _maxpool_backward_nb(np.ascontiguousarray(dout), arg, np.zeros(x_shape), k)


def implementation():
    """Name of the bound kernel family: ``"numba"`` or ``"numpy"``."""
    return "numba" if USE_NUMBA else "numpy"


if USE_NUMBA:
    conv2d_forward = conv2d_forward_numba
    conv2d_backward = conv2d_backward_numba
    maxpool_forward = maxpool_forward_numba
    maxpool_backward = maxpool_backward_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward = conv2d_backward_numpy
    maxpool_forward = maxpool_forward_numpy
    maxpool_backward = maxpool_backward_numpy
