"""Hot numeric kernels: conv patch extraction/scatter and max pooling.

Two implementations live side by side. The numba path compiles the gather /
scatter loops with @njit(nogil=True) so client threads can overlap; the numpy
path does the same work with stride tricks and slice arithmetic. The actual
contractions (the expensive part) go through numpy matmul in both cases, so
the two backends produce bitwise-identical results.

Conv weights are stored (filters, in_channels, kh, kw) so that the channel
group feeding input channel c is ``w[:, c, :, :]``. Patch columns are ordered
(p, q, c)-major -- channels innermost -- which keeps the extraction loop on
contiguous NHWC memory; the weight matrix is transposed to match before the
matmul.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fedlith.backend import using_numba

if using_numba():
    from numba import njit
else:  # pragma: no cover - exercised via FEDLITH_BACKEND=numpy runs
    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True, nogil=True)
def _im2col_nb(x, kh, kw, stride):
    B, H, W, C = x.shape
    OH = (H - kh) // stride + 1
    OW = (W - kw) // stride + 1
    cols = np.empty((B * OH * OW, kh * kw * C), dtype=np.float64)
    r = 0
    for n in range(B):
        for i in range(OH):
            i0 = i * stride
            for j in range(OW):
                j0 = j * stride
                t = 0
                for p in range(kh):
                    for q in range(kw):
                        cols[r, t:t + C] = x[n, i0 + p, j0 + q, :]
                        t += C
                r += 1
    return cols


@njit(cache=True, nogil=True)
def _col2im_nb(dcols, B, H, W, C, kh, kw, stride):
    OH = (H - kh) // stride + 1
    OW = (W - kw) // stride + 1
    dx = np.zeros((B, H, W, C), dtype=np.float64)
    r = 0
    for n in range(B):
        for i in range(OH):
            i0 = i * stride
            for j in range(OW):
                j0 = j * stride
                t = 0
                for p in range(kh):
                    for q in range(kw):
                        dx[n, i0 + p, j0 + q, :] += dcols[r, t:t + C]
                        t += C
                r += 1
    return dx


@njit(cache=True, nogil=True)
def _maxpool_fwd_nb(x, k):
    B, H, W, C = x.shape
    OH = H // k
    OW = W // k
    y = np.empty((B, OH, OW, C), dtype=np.float64)
    idx = np.empty((B, OH, OW, C), dtype=np.int64)
    for n in range(B):
        for i in range(OH):
            for j in range(OW):
                for c in range(C):
                    best = x[n, i * k, j * k, c]
                    bi = 0
                    for p in range(k):
                        for q in range(k):
                            v = x[n, i * k + p, j * k + q, c]
                            if v > best:
                                best = v
                                bi = p * k + q
                    y[n, i, j, c] = best
                    idx[n, i, j, c] = bi
    return y, idx


@njit(cache=True, nogil=True)
def _maxpool_bwd_nb(dy, idx, k, H, W):
    B, OH, OW, C = dy.shape
    dx = np.zeros((B, H, W, C), dtype=np.float64)
    for n in range(B):
        for i in range(OH):
            for j in range(OW):
                for c in range(C):
                    t = idx[n, i, j, c]
                    dx[n, i * k + t // k, j * k + t % k, c] += dy[n, i, j, c]
    return dx


def _im2col_np(x, kh, kw, stride):
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win is (B, OH, OW, C, kh, kw); put channels innermost before flattening
    B, OH, OW = win.shape[:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * OH * OW, -1)


def _col2im_np(dcols, B, H, W, C, kh, kw, stride):
    OH = (H - kh) // stride + 1
    OW = (W - kw) // stride + 1
    dx = np.zeros((B, H, W, C), dtype=np.float64)
    d = dcols.reshape(B, OH, OW, kh, kw, C)
    for p in range(kh):
        for q in range(kw):
            dx[:, p:p + stride * OH:stride, q:q + stride * OW:stride, :] += d[:, :, :, p, q, :]
    return dx


def _maxpool_fwd_np(x, k):
    B, H, W, C = x.shape
    OH, OW = H // k, W // k
    win = x.reshape(B, OH, k, OW, k, C).transpose(0, 1, 3, 5, 2, 4)
    flat = win.reshape(B, OH, OW, C, k * k)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def _maxpool_bwd_np(dy, idx, k, H, W):
    B, OH, OW, C = dy.shape
    flat = np.zeros((B, OH, OW, C, k * k), dtype=np.float64)
    np.put_along_axis(flat, idx[..., None], dy[..., None], axis=-1)
    win = flat.reshape(B, OH, OW, C, k, k).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(win.reshape(B, H, W, C))


if using_numba():
    _im2col, _col2im = _im2col_nb, _col2im_nb
    _maxpool_fwd, _maxpool_bwd = _maxpool_fwd_nb, _maxpool_bwd_nb
else:
    _im2col, _col2im = _im2col_np, _col2im_np
    _maxpool_fwd, _maxpool_bwd = _maxpool_fwd_np, _maxpool_bwd_np


def _weight_matrix(w):
    """(F, C, kh, kw) weights as a (kh*kw*C, F) matmul operand."""
    F = w.shape[0]
    return w.transpose(2, 3, 1, 0).reshape(-1, F)


def conv2d_forward(x, w, b, stride):
    """Valid-padding conv on NHWC input, weights (F, C, kh, kw).

    Returns (y, cols); cols is kept for the backward contraction.
    """
    F, C, kh, kw = w.shape
    cols = _im2col(x, kh, kw, stride)
    y2 = cols @ _weight_matrix(w)
    y2 += b
    B, H, W, _ = x.shape
    OH = (H - kh) // stride + 1
    OW = (W - kw) // stride + 1
    return y2.reshape(B, OH, OW, F), cols


def conv2d_backward(dy, cols, x_shape, w, stride, need_dx=True):
    """Gradients of the valid conv. dx is skipped when the layer is first."""
    F, C, kh, kw = w.shape
    B, H, W, _ = x_shape
    dy2 = dy.reshape(-1, F)
    dw = (dy2.T @ cols).reshape(F, kh, kw, C).transpose(0, 3, 1, 2)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, np.ascontiguousarray(dw), db
    dcols = dy2 @ _weight_matrix(w).T
    dx = _col2im(dcols, B, H, W, C, kh, kw, stride)
    return dx, np.ascontiguousarray(dw), db


def maxpool_forward(x, k):
    """Non-overlapping k*k max pooling (stride == k). Ties pick the first cell."""
    return _maxpool_fwd(x, k)


def maxpool_backward(dy, idx, k, in_shape):
    _, H, W, _ = in_shape
    return _maxpool_bwd(dy, idx, k, H, W)


def warmup():
    """Trigger JIT compilation of the hot kernels on tiny inputs."""
    x = np.zeros((1, 4, 4, 2))
    w = np.zeros((1, 2, 2, 2))
    y, cols = conv2d_forward(x, w, np.zeros(1), 1)
    conv2d_backward(y, cols, x.shape, w, 1)
    y, idx = maxpool_forward(x, 2)
    maxpool_backward(y, idx, 2, x.shape)
