"""Bilinear feature sampling.

Two primitives: fixed-grid bilinear upsampling (the decoder's default path
and the ablation baseline) and bilinear sampling at offset-displaced
coordinates, differentiable in both the features and the offsets.

Offset fields are N x 2 x H x W, channel 0 = delta-x (columns), channel 1 =
delta-y (rows), in pixels of the sampled grid.  Output pixel (i, j) reads the
input at (j + dx, i + dy): the value is the bilinear blend of the at most
four enclosing grid points, and sample points farther than one pixel outside
the grid contribute zero (no coordinate clamping).
"""

import numpy as np

from .engine.tensor import Tensor, as_tensor
from .errors import ConfigError, ShapeError


def _axis_lerp_indices(n_in, n_out, factor, dtype):
    """Source indices and fraction for one upsampled axis (edge clamped)."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
    lo = np.floor(src)
    frac = (src - lo).astype(dtype)
    i0 = np.clip(lo, 0, n_in - 1).astype(np.int64)
    i1 = np.clip(lo + 1, 0, n_in - 1).astype(np.int64)
    return i0, i1, frac


def bilinear_upsample(x, factor):
    """Upsample H and W by an integer factor, align-corners=false."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects a 4D tensor, got shape {x.shape}")
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ConfigError(f"upsample factor must be a positive integer, got {factor!r}")
    if factor == 1:
        return x
    n, c, h, w = x.data.shape
    dtype = x.data.dtype
    y0, y1, fy = _axis_lerp_indices(h, h * factor, factor, dtype)
    x0, x1, fx = _axis_lerp_indices(w, w * factor, factor, dtype)

    # separable lerp, a + f*(b - a): exact for constants and at factor 1
    rows = x.data[:, :, y0, :]
    rows = rows + fy[None, None, :, None] * (x.data[:, :, y1, :] - rows)
    out = rows[:, :, :, x0]
    out = out + fx[None, None, None, :] * (rows[:, :, :, x1] - out)

    def bwd(g):
        dw0 = g * (1.0 - fx)[None, None, None, :]
        dw1 = g * fx[None, None, None, :]
        drows = np.zeros((n, c, h * factor, w), dtype=g.dtype)
        np.add.at(drows, (slice(None), slice(None), slice(None), x0), dw0)
        np.add.at(drows, (slice(None), slice(None), slice(None), x1), dw1)
        dh0 = drows * (1.0 - fy)[None, None, :, None]
        dh1 = drows * fy[None, None, :, None]
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(dx, (slice(None), slice(None), y0), dh0)
        np.add.at(dx, (slice(None), slice(None), y1), dh1)
        return (dx,)

    return Tensor._wrap(out, (x,), bwd)


def sample_with_offsets(x, offsets):
    """Evaluate the input at per-pixel offset-displaced coordinates.

    Output pixel value = sum over grid points (m, n) of
    input(n, m) * max(0, 1 - |sx - m|) * max(0, 1 - |sy - n|) with
    (sx, sy) = (j + dx, i + dy).  Only the four enclosing points have
    nonzero weight, so the implementation gathers exactly those.  At integer
    sample coordinates the derivative takes the left-continuous branch.
    """
    x, offsets = as_tensor(x), as_tensor(offsets)
    if x.ndim != 4 or offsets.ndim != 4:
        raise ShapeError(f"expected 4D tensors, got {x.shape} and {offsets.shape}")
    if offsets.data.shape[1] != 2:
        raise ShapeError(f"offset field needs 2 channels, got shape {offsets.shape}")
    if offsets.data.shape[0] != x.data.shape[0] or offsets.data.shape[2:] != x.data.shape[2:]:
        raise ShapeError(f"offset extents {offsets.shape} do not match input {x.shape}")
    n, c, h, w = x.data.shape
    dtype = x.data.dtype

    jj = np.arange(w, dtype=np.float64)[None, None, :]
    ii = np.arange(h, dtype=np.float64)[None, :, None]
    sx = jj + offsets.data[:, 0].astype(np.float64)      # [N, H, W]
    sy = ii + offsets.data[:, 1].astype(np.float64)

    # ceil - 1 puts integer coordinates at fraction 1: left-continuous branch
    x0f = np.ceil(sx) - 1.0
    y0f = np.ceil(sy) - 1.0
    fx = (sx - x0f).astype(dtype)
    fy = (sy - y0f).astype(dtype)
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)

    flat = x.data.reshape(n, c, h * w)

    def corner(yc, xc):
        valid = ((yc >= 0) & (yc < h) & (xc >= 0) & (xc < w))
        lin = np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1)
        v = np.take_along_axis(flat, lin.reshape(n, 1, h * w), axis=2)
        v = v.reshape(n, c, h, w) * valid[:, None].astype(dtype)
        return v, valid, lin

    v00, m00, l00 = corner(y0, x0)
    v01, m01, l01 = corner(y0, x0 + 1)
    v10, m10, l10 = corner(y0 + 1, x0)
    v11, m11, l11 = corner(y0 + 1, x0 + 1)

    wx0, wx1 = (1.0 - fx)[:, None], fx[:, None]          # [N, 1, H, W]
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    out = (wy0 * (wx0 * v00 + wx1 * v01) + wy1 * (wx0 * v10 + wx1 * v11)).astype(dtype, copy=False)

    def bwd(g):
        # input gradient: scatter each corner's weighted share back to its cell
        dflat = np.zeros(n * c * h * w, dtype=np.float64)
        rows = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
        for wgt, msk, lin in (
            (wy0 * wx0, m00, l00), (wy0 * wx1, m01, l01),
            (wy1 * wx0, m10, l10), (wy1 * wx1, m11, l11),
        ):
            gc = g * wgt * msk[:, None]
            idx = (rows + lin.reshape(n, 1, h * w)).reshape(n * c, h * w)
            dflat += np.bincount(idx.ravel(), weights=gc.reshape(n * c, h * w).ravel(),
                                 minlength=n * c * h * w)
        dx = dflat.reshape(n, c, h, w).astype(g.dtype, copy=False)

        # offset gradient: weight derivatives against masked corner values
        dsx = (g * (wy0 * (v01 - v00) + wy1 * (v11 - v10))).sum(axis=1)
        dsy = (g * (wx0 * (v10 - v00) + wx1 * (v11 - v01))).sum(axis=1)
        doff = np.stack([dsx, dsy], axis=1).astype(g.dtype, copy=False)
        return dx, doff

    return Tensor._wrap(out, (x, offsets), bwd)
