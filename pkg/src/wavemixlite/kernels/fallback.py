"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or explicitly disabled
(WAVEMIXLITE_PURE_PY=1).  Must stay numerically interchangeable with the
Cython versions in _ckernels.pyx.
"""

import numpy as np


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(N,C,H,W) -> (N, C*k*k, Ho*Wo) patch matrix for cross-correlation."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return win.reshape(n, c * k * k, ho * wo)


def col2im(cols: np.ndarray, n: int, c: int, h: int, w: int,
           k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patches back to (N,C,H,W)."""
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def maxpool2x2(x: np.ndarray):
    """2x2/stride-2 max pool; returns (out, argmax) with argmax in 0..3.

    Ties resolve to the first index in row-major window order.
    """
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1).astype(np.int64)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2x2_backward(gout: np.ndarray, arg: np.ndarray, h: int, w: int) -> np.ndarray:
    """Route gradients to the argmax position of each 2x2 window."""
    n, c, ho, wo = gout.shape
    gwin = np.zeros((n, c, ho, wo, 4), dtype=gout.dtype)
    np.put_along_axis(gwin, arg[..., None], gout[..., None], axis=-1)
    gx = gwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return np.ascontiguousarray(gx)
