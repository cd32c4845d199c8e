"""Token-mixing transforms: multi-level 2D Haar DWT and ablation mixers.

The Haar transform is orthonormal (1/sqrt(2) per 1-D filter, so 1/2 per
2x2 block), which makes its backward pass equal to its inverse.  None of
the mixers carry parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ShapeError, Tensor, concat_channels, record, take_channels
from .ops import max_pool2d

MIXER_KINDS = ("dwt", "maxpool", "dft", "identity")


def _haar_forward(xd: np.ndarray) -> np.ndarray:
    a = xd[:, :, 0::2, 0::2]
    b = xd[:, :, 0::2, 1::2]
    c = xd[:, :, 1::2, 0::2]
    d = xd[:, :, 1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    lh = (a - b + c - d) * 0.5
    hl = (a + b - c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    n, ch, h2, w2 = ll.shape
    out = np.stack([ll, lh, hl, hh], axis=2)          # (N, C, 4, H/2, W/2)
    return out.reshape(n, 4 * ch, h2, w2).astype(xd.dtype, copy=False)


def _haar_inverse(yd: np.ndarray) -> np.ndarray:
    n, c4, h, w = yd.shape
    c = c4 // 4
    y5 = yd.reshape(n, c, 4, h, w)
    ll, lh, hl, hh = y5[:, :, 0], y5[:, :, 1], y5[:, :, 2], y5[:, :, 3]
    a = (ll + lh + hl + hh) * 0.5
    b = (ll - lh + hl - hh) * 0.5
    cc = (ll + lh - hl - hh) * 0.5
    d = (ll - lh - hl + hh) * 0.5
    out = np.empty((n, c, 2 * h, 2 * w), dtype=yd.dtype)
    out[:, :, 0::2, 0::2] = a
    out[:, :, 0::2, 1::2] = b
    out[:, :, 1::2, 0::2] = cc
    out[:, :, 1::2, 1::2] = d
    return out


def haar_dwt2d(x: Tensor) -> Tensor:
    """Level-1 Haar DWT: (N,C,H,W) -> (N,4C,H/2,W/2).

    Output channels hold (LL, LH, HL, HH) per input channel, channel-major:
    all four subbands of channel 0 first, then channel 1, and so on.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"haar_dwt2d: H and W must be even, got {h}x{w}")
    y = _haar_forward(x.data)

    def bwd(gout):
        # orthonormal transform: adjoint == inverse
        return (_haar_inverse(gout),)

    return record(y, (x,), bwd)


def haar_idwt2d(y: Tensor) -> Tensor:
    """Exact inverse of haar_dwt2d: (N,4C,H,W) -> (N,C,2H,2W)."""
    n, c4, h, w = y.shape
    if c4 % 4:
        raise ShapeError(f"haar_idwt2d: channel count {c4} not divisible by 4")
    out = _haar_inverse(y.data)

    def bwd(gout):
        return (_haar_forward(gout),)

    return record(out, (y,), bwd)


def space_to_depth(x: Tensor, r: int) -> Tensor:
    """Repack (N,C,H,W) into (N, C*r*r, H/r, W/r) by r x r blocks."""
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"space_to_depth: dims {h}x{w} not divisible by {r}")
    y = (x.data.reshape(n, c, h // r, r, w // r, r)
         .transpose(0, 1, 3, 5, 2, 4)
         .reshape(n, c * r * r, h // r, w // r))

    def bwd(gout):
        g = (gout.reshape(n, c, r, r, h // r, w // r)
             .transpose(0, 1, 4, 2, 5, 3)
             .reshape(n, c, h, w))
        return (np.ascontiguousarray(g),)

    return record(np.ascontiguousarray(y), (x,), bwd)


def dft2_real(x: Tensor) -> Tensor:
    """Real part of the unnormalized 2D DFT over (H, W); self-adjoint."""
    y = np.fft.fft2(x.data, axes=(-2, -1)).real.astype(x.dtype)

    def bwd(gout):
        return (np.fft.fft2(gout, axes=(-2, -1)).real.astype(x.dtype),)

    return record(y, (x,), bwd)


@dataclass(frozen=True)
class MixerKind:
    """Which token mixer a block uses, plus the DWT recursion depth."""

    kind: str = "dwt"
    levels: int = 1

    def __post_init__(self):
        if self.kind not in MIXER_KINDS:
            raise ValueError(f"unknown mixer kind {self.kind!r}")
        if self.kind == "dwt" and not 1 <= self.levels <= 4:
            raise ValueError(f"dwt levels must be in [1, 4], got {self.levels}")

    @property
    def downscale(self) -> int:
        """Spatial reduction factor of the mixer output."""
        if self.kind == "dwt":
            return 2 ** self.levels
        if self.kind == "maxpool":
            return 2
        return 1

    def out_shape(self, shape: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
        n, c, h, w = shape
        if self.kind == "dwt":
            f = 2 ** self.levels
            return (n, c * f * f, h // f, w // f)
        if self.kind == "maxpool":
            return (n, c, h // 2, w // 2)
        return shape


def _mix_dwt(x: Tensor, levels: int) -> Tensor:
    y = haar_dwt2d(x)
    if levels == 1:
        return y
    c4 = y.shape[1]
    ll = take_channels(y, slice(0, c4, 4))
    detail_idx = np.array([i for i in range(c4) if i % 4 != 0])
    details = take_channels(y, detail_idx)
    sub = _mix_dwt(ll, levels - 1)
    packed = space_to_depth(details, 2 ** (levels - 1))
    return concat_channels([sub, packed])


def mix(x: Tensor, kind: MixerKind) -> Tensor:
    """Apply the selected token mixer.

    Multi-level DWT recurses on the LL band (Mallat decomposition); the
    detail bands of earlier levels are repacked by space_to_depth so the
    result is a single (N, 4^k*C, H/2^k, W/2^k) tensor.
    """
    if kind.kind == "dwt":
        f = 2 ** kind.levels
        if x.shape[2] % f or x.shape[3] % f:
            raise ShapeError(
                f"dwt level {kind.levels} needs H,W divisible by {f}, got {x.shape[2]}x{x.shape[3]}")
        return _mix_dwt(x, kind.levels)
    if kind.kind == "maxpool":
        return max_pool2d(x)
    if kind.kind == "dft":
        return dft2_real(x)
    return x
