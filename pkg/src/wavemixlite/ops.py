"""Neural-network layers and losses with forward and backward rules.

Convolutions run as im2col/col2im packing plus BLAS matmuls; the packing
kernels come from the selected backend (compiled or numpy).  Backward
passes recompute the patch matrix instead of caching it, trading a little
time for a much smaller peak memory footprint.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from . import kernels as K
from .engine import Parameter, ShapeError, Tensor, record

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    """He-uniform init: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _contig(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


class Conv2dLayer:
    """2D cross-correlation with zero padding and per-channel bias."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding = stride, padding
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        return ho, wo

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self)


def conv2d(x: Tensor, layer: Conv2dLayer) -> Tensor:
    n, c, h, w = x.shape
    if c != layer.c_in:
        raise ShapeError(f"conv2d: input has {c} channels, layer expects {layer.c_in}")
    ho, wo = layer.out_hw(h, w)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: output dims {ho}x{wo} not positive for input {h}x{w}")
    k, s, p = layer.k, layer.stride, layer.padding
    weight, bias = layer.weight, layer.bias

    cols = K.im2col(_contig(x.data), k, s, p)                      # (N, C*k*k, Ho*Wo)
    w_mat = weight.data.reshape(layer.c_out, -1)
    y = np.matmul(w_mat, cols) + bias.data[:, None]
    y = y.reshape(n, layer.c_out, ho, wo)

    def bwd(gout):
        g3 = gout.reshape(n, layer.c_out, ho * wo)
        cols_b = K.im2col(_contig(x.data), k, s, p)
        gw = np.tensordot(g3, cols_b, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gb = g3.sum(axis=(0, 2))
        gcols = np.matmul(w_mat.T, g3)
        gx = K.col2im(_contig(gcols), n, c, h, w, k, s, p)
        return gx, gw, gb

    return record(y, (x, weight, bias), bwd)


class ConvTranspose2dLayer:
    """Transposed convolution (adjoint of strided conv) with bias."""

    def __init__(self, c_in: int, c_out: int, k: int = 4, stride: int = 2, padding: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding = stride, padding
        self.weight = Parameter(kaiming_uniform(rng, (c_in, c_out, k, k), c_out * k * k, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h - 1) * self.stride - 2 * self.padding + self.k
        wo = (w - 1) * self.stride - 2 * self.padding + self.k
        return ho, wo

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self)


def conv_transpose2d(x: Tensor, layer: ConvTranspose2dLayer) -> Tensor:
    n, c, h, w = x.shape
    if c != layer.c_in:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, layer expects {layer.c_in}")
    ho, wo = layer.out_hw(h, w)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: output dims {ho}x{wo} not positive")
    k, s, p = layer.k, layer.stride, layer.padding
    weight, bias = layer.weight, layer.bias
    w_mat = weight.data.reshape(c, -1)                             # (C_in, C_out*k*k)

    x3 = x.data.reshape(n, c, h * w)
    cols = np.matmul(w_mat.T, x3)                                  # (N, C_out*k*k, H*W)
    y = K.col2im(_contig(cols), n, layer.c_out, ho, wo, k, s, p)
    y += bias.data[None, :, None, None]

    def bwd(gout):
        gcols = K.im2col(_contig(gout), k, s, p)                   # (N, C_out*k*k, H*W)
        gx = np.matmul(w_mat, gcols).reshape(n, c, h, w)
        gw = np.tensordot(x3, gcols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gb = gout.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return record(y, (x, weight, bias), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with the erf-based normal CDF."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * xd.dtype.type(_INV_SQRT2)))
    y = xd * phi

    def bwd(gout):
        pdf = np.exp(-0.5 * xd * xd) * xd.dtype.type(_INV_SQRT_2PI)
        return (gout * (phi + xd * pdf),)

    return record(y.astype(xd.dtype, copy=False), (x,), bwd)


class BatchNorm2d:
    """Per-channel batch normalization with running statistics."""

    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        self.c = c
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(c, dtype=dtype))
        self.beta = Parameter(np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.training = True

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm2d(x, self)


def batch_norm2d(x: Tensor, layer: BatchNorm2d) -> Tensor:
    n, c, h, w = x.shape
    if c != layer.c:
        raise ShapeError(f"batch_norm2d: input has {c} channels, layer expects {layer.c}")
    gamma, beta = layer.gamma, layer.beta
    xd = x.data

    if layer.training:
        m = n * h * w
        if m < 2:
            raise ShapeError("batch_norm2d: train mode needs at least 2 elements per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + xd.dtype.type(layer.eps))
        xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
        mom = layer.momentum
        layer.running_mean = ((1.0 - mom) * layer.running_mean + mom * mean).astype(xd.dtype)
        # unbiased batch variance feeds the running estimate
        layer.running_var = ((1.0 - mom) * layer.running_var + mom * var * m / (m - 1)).astype(xd.dtype)
        y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def bwd(gout):
            dxhat = gout * gamma.data[None, :, None, None]
            sum_dxhat = dxhat.sum(axis=(0, 2, 3))
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
            gx = (inv_std[None, :, None, None] / m) * (
                m * dxhat
                - sum_dxhat[None, :, None, None]
                - xhat * sum_dxhat_xhat[None, :, None, None]
            )
            ggamma = (gout * xhat).sum(axis=(0, 2, 3))
            gbeta = gout.sum(axis=(0, 2, 3))
            return gx.astype(xd.dtype, copy=False), ggamma, gbeta

        return record(y, (x, gamma, beta), bwd)

    inv_std = 1.0 / np.sqrt(layer.running_var + xd.dtype.type(layer.eps))
    xhat = (xd - layer.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd_eval(gout):
        gx = gout * (gamma.data * inv_std)[None, :, None, None]
        ggamma = (gout * xhat).sum(axis=(0, 2, 3))
        gbeta = gout.sum(axis=(0, 2, 3))
        return gx.astype(xd.dtype, copy=False), ggamma, gbeta

    return record(y, (x, gamma, beta), bwd_eval)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling; gradient goes to the first max per window."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d: spatial dims must be even, got {h}x{w}")
    out, arg = K.maxpool2x2(_contig(x.data))

    def bwd(gout):
        return (K.maxpool2x2_backward(_contig(gout), arg, h, w),)

    return record(out, (x,), bwd)


_interp_cache: dict = {}


def _interp_matrix(size: int, factor: int, dtype) -> np.ndarray:
    """Row-interpolation matrix for align-corners=false bilinear scaling."""
    key = (size, factor, np.dtype(dtype).name)
    mat = _interp_cache.get(key)
    if mat is None:
        out_size = size * factor
        dst = np.arange(out_size, dtype=np.float64)
        src = (dst + 0.5) / factor - 0.5
        lo = np.floor(src).astype(np.int64)
        frac = src - lo
        lo_c = np.clip(lo, 0, size - 1)
        hi_c = np.clip(lo + 1, 0, size - 1)
        mat = np.zeros((out_size, size), dtype=np.float64)
        mat[np.arange(out_size), lo_c] += 1.0 - frac
        mat[np.arange(out_size), hi_c] += frac
        mat = mat.astype(dtype)
        _interp_cache[key] = mat
    return mat


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Parameter-free bilinear upsampling by an integer factor."""
    if factor < 1:
        raise ShapeError(f"upsample_bilinear: factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    ry = _interp_matrix(h, factor, x.dtype)
    rx = _interp_matrix(w, factor, x.dtype)
    y = np.matmul(np.matmul(ry, x.data), rx.T)

    def bwd(gout):
        return (np.matmul(np.matmul(ry.T, gout), rx),)

    return record(y, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(gout):
        return (np.broadcast_to(gout / (h * w), x.shape).astype(x.dtype, copy=False),)

    return record(y, (x,), bwd)


def _prep_targets(logits_shape, targets, name: str) -> np.ndarray:
    n, c, h, w = logits_shape
    t = np.asarray(targets)
    if t.shape == (n,) and (h, w) == (1, 1):
        t = t.reshape(n, 1, 1)
    elif t.shape != (n, h, w):
        raise ShapeError(f"{name}: targets shape {t.shape} incompatible with logits {logits_shape}")
    if t.min() < 0 or t.max() >= c:
        raise ShapeError(f"{name}: target class out of range [0, {c})")
    return t.astype(np.int64)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy over every (batch, pixel) position."""
    n, c, h, w = logits.shape
    t = _prep_targets(logits.shape, targets, "softmax_cross_entropy")
    logp = _log_softmax(logits.data)
    picked = np.take_along_axis(logp, t[:, None, :, :], axis=1)[:, 0]
    count = n * h * w
    loss = np.array(-picked.sum() / count, dtype=logits.dtype).reshape(1, 1, 1, 1)

    def bwd(gout):
        g = np.exp(logp)
        tt = t[:, None, :, :]
        np.put_along_axis(g, tt, np.take_along_axis(g, tt, axis=1) - 1.0, axis=1)
        return (g * (gout.reshape(()) / count),)

    return record(loss, (logits,), bwd)


def focal_loss(logits: Tensor, targets, gamma: float = 2.0) -> Tensor:
    """Mean of -(1 - p_t)^gamma * log(p_t) over every position."""
    if gamma < 0:
        raise ShapeError(f"focal_loss: gamma must be >= 0, got {gamma}")
    n, c, h, w = logits.shape
    t = _prep_targets(logits.shape, targets, "focal_loss")
    dt = logits.dtype
    logp = _log_softmax(logits.data)
    logpt = np.take_along_axis(logp, t[:, None, :, :], axis=1)[:, 0]    # (N,H,W)
    pt = np.exp(logpt)
    one_minus = 1.0 - pt
    pow_g = one_minus ** gamma
    count = n * h * w
    loss = np.array(-(pow_g * logpt).sum() / count, dtype=dt).reshape(1, 1, 1, 1)

    def bwd(gout):
        with np.errstate(divide="ignore", invalid="ignore"):
            pow_gm1 = np.where(one_minus > 0, one_minus ** (gamma - 1.0), 0.0)
        coef = gamma * pt * pow_gm1 * logpt - pow_g                     # (N,H,W)
        p = np.exp(logp)
        g = -p * coef[:, None, :, :]
        tt = t[:, None, :, :]
        np.put_along_axis(g, tt, np.take_along_axis(g, tt, axis=1) + coef[:, None], axis=1)
        return (g.astype(dt, copy=False) * (gout.reshape(()) / count),)

    return record(loss, (logits,), bwd)
