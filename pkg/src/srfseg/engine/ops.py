"""Differentiable operators over Tensors.

Every op builds its output with `Tensor._wrap(data, parents, bwd)` where
`bwd` maps the output gradient to one gradient per parent.  Forward code
never mutates its inputs, so repeated application is bit-identical.
"""

import numpy as np

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._wrap(data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._wrap(data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor._wrap(data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._wrap(data, (a, b), bwd)


def neg(a):
    a = as_tensor(a)
    return Tensor._wrap(-a.data, (a,), lambda g: (-g,))


def pow_const(a, p):
    """a ** p for a python-scalar exponent."""
    a = as_tensor(a)
    data = a.data ** p

    def bwd(g):
        return (g * p * a.data ** (p - 1),)

    return Tensor._wrap(data, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        return (g * data,)

    return Tensor._wrap(data, (a,), bwd)


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return Tensor._wrap(data, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor._wrap(data, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for i in ax:
            count *= a.data.shape[i]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return Tensor._wrap(data, (a,), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)
    orig = a.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return Tensor._wrap(data, (a,), bwd)


def transpose(a, axes):
    a = as_tensor(a)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = np.argsort(axes)

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor._wrap(data, (a,), bwd)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    for t in tensors:
        if not -t.ndim <= axis < t.ndim:
            raise ShapeError(f"concat axis {axis} out of range for shape {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._wrap(data, tuple(tensors), bwd)


def take_rows(a, idx):
    """Gather rows of a 2D tensor; backward scatter-adds (repeats allowed)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"take_rows expects a 2D tensor, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._wrap(data, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a):
    a = as_tensor(a)
    data = np.where(a.data > 0, a.data, 0)
    # subgradient 1 at exactly 0: zero-initialized residual branches sit on
    # the kink at init and would otherwise never receive gradient
    mask = a.data >= 0

    def bwd(g):
        return (np.where(mask, g, 0),)

    return Tensor._wrap(data, (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # evaluate on the side that keeps exp() from overflowing
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype, copy=False)

    def bwd(g):
        return (g * data * (1.0 - data),)

    return Tensor._wrap(data, (a,), bwd)


def softmax(a, axis):
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return Tensor._wrap(data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """2D matmul, or batched matmul for equal-rank 3D stacks."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ShapeError(f"matmul supports 2D@2D or 3D@3D, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        return (g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g)

    return Tensor._wrap(data, (a, b), bwd)


def linear(x, weight, bias=None):
    """Fully-connected layer: x [N, F] @ weight [F, O] (+ bias [O])."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2D input and weight, got {x.shape}, {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# convolution


def _pad_hw(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp, k, stride):
    """Strided [N, C, Ho, Wo, k, k] view over a padded input (no copy)."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def _col2im(dcols, x_shape, k, stride, padding):
    """Scatter [N, Ho, Wo, C, k, k] patch gradients back onto the input."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    dcols = np.ascontiguousarray(dcols.transpose(0, 3, 4, 5, 1, 2))  # [N, C, k, k, Ho, Wo]
    for u in range(k):
        for v in range(k):
            out[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride] += dcols[:, :, u, v]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """2D convolution, weight [C_out, C_in/groups, k, k] (square kernels).

    groups == C_in gives the depthwise case, which takes a vectorized path;
    other group counts loop over channel slices.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weight, got {x.shape} and {weight.shape}")
    if padding < 0:
        raise ConfigError(f"padding must be >= 0, got {padding}")
    n, c_in, h, w = x.data.shape
    c_out, c_in_g, kh, kw = weight.data.shape
    if kh != kw:
        raise ShapeError(f"only square kernels supported, got weight shape {weight.shape}")
    k = kh
    if c_in % groups != 0 or c_out % groups != 0:
        raise ConfigError(f"groups={groups} does not divide channels ({c_in} in, {c_out} out)")
    if c_in_g != c_in // groups:
        raise ShapeError(
            f"weight shape {weight.shape} inconsistent with input shape {x.shape} and groups={groups}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"kernel {k} larger than padded input {(h + 2 * padding, w + 2 * padding)}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.data.shape} != ({c_out},)")

    if k == 1 and stride == 1 and padding == 0 and groups == 1:
        # pointwise fast path: batched matmul over flattened positions
        xf = x.data.reshape(n, c_in, h * w)
        wmat = weight.data.reshape(c_out, c_in)
        out = (wmat @ xf).reshape(n, c_out, h, w)
        if bias is not None:
            out = out + bias.data.reshape(1, c_out, 1, 1)

        def bwd(g):
            gf = g.reshape(n, c_out, h * w)
            dx = (wmat.T @ gf).reshape(n, c_in, h, w)
            dw = np.tensordot(gf, xf, axes=([0, 2], [0, 2])).reshape(weight.data.shape)
            db = None if bias is None else g.sum(axis=(0, 2, 3))
            return (dx, dw, db) if bias is not None else (dx, dw)

        parents = (x, weight, bias) if bias is not None else (x, weight)
        return Tensor._wrap(out, parents, bwd)

    xp = _pad_hw(x.data, padding)
    win = _windows(xp, k, stride)            # [N, C, Ho, Wo, k, k]
    ho, wo = win.shape[2], win.shape[3]

    if groups == 1:
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c_in * k * k)
        wmat = weight.data.reshape(c_out, c_in * k * k)
        out = (cols @ wmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
        if bias is not None:
            out = out + bias.data.reshape(1, c_out, 1, 1)

        def bwd(g):
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, c_out)
            dw = (gmat.T @ cols).reshape(c_out, c_in, k, k)
            dcols = (gmat @ wmat).reshape(n, ho, wo, c_in, k, k)
            dx = _col2im(dcols, x.data.shape, k, stride, padding)
            db = None if bias is None else g.sum(axis=(0, 2, 3))
            return (dx, dw, db) if bias is not None else (dx, dw)

    elif groups == c_in and c_in_g == 1:
        mult = c_out // c_in  # channel multiplier, 1 in practice
        out = np.einsum("nchwuv,cmuv->ncmhw", win,
                        weight.data.reshape(c_in, mult, k, k), optimize=True)
        out = np.ascontiguousarray(out.reshape(n, c_out, ho, wo))
        if bias is not None:
            out = out + bias.data.reshape(1, c_out, 1, 1)

        def bwd(g):
            gg = g.reshape(n, c_in, mult, ho, wo)
            dw = np.einsum("nchwuv,ncmhw->cmuv", win, gg, optimize=True).reshape(weight.data.shape)
            dwin = np.einsum("ncmhw,cmuv->nhwcuv", gg, weight.data.reshape(c_in, mult, k, k),
                             optimize=True)
            dx = _col2im(dwin, x.data.shape, k, stride, padding)
            db = None if bias is None else g.sum(axis=(0, 2, 3))
            return (dx, dw, db) if bias is not None else (dx, dw)

    else:
        cg_in, cg_out = c_in // groups, c_out // groups
        wmat = weight.data.reshape(groups, cg_out, cg_in * k * k)
        cols_g = []
        outs = []
        for gi in range(groups):
            wg = win[:, gi * cg_in:(gi + 1) * cg_in]
            cols = np.ascontiguousarray(wg.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cg_in * k * k)
            cols_g.append(cols)
            outs.append((cols @ wmat[gi].T).reshape(n, ho, wo, cg_out))
        out = np.ascontiguousarray(np.concatenate(outs, axis=3).transpose(0, 3, 1, 2))
        if bias is not None:
            out = out + bias.data.reshape(1, c_out, 1, 1)

        def bwd(g):
            dw = np.empty_like(weight.data).reshape(groups, cg_out, cg_in * k * k)
            dx = np.zeros_like(x.data)
            for gi in range(groups):
                gmat = np.ascontiguousarray(
                    g[:, gi * cg_out:(gi + 1) * cg_out].transpose(0, 2, 3, 1)).reshape(n * ho * wo, cg_out)
                dw[gi] = gmat.T @ cols_g[gi]
                dcols = (gmat @ wmat[gi]).reshape(n, ho, wo, cg_in, k, k)
                dx[:, gi * cg_in:(gi + 1) * cg_in] = _col2im(
                    dcols, (n, cg_in, h, w), k, stride, padding)
            dw = dw.reshape(weight.data.shape)
            db = None if bias is None else g.sum(axis=(0, 2, 3))
            return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._wrap(out, parents, bwd)


# ---------------------------------------------------------------------------
# pooling


def pool2d(x, mode, out_h=None, out_w=None):
    """Average pooling. mode "global-average" ignores out extents (-> 1x1);
    mode "average" requires the input extents to be divisible by the output's."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects a 4D tensor, got shape {x.shape}")
    n, c, h, w = x.data.shape
    if mode == "global-average":
        out_h, out_w = 1, 1
    elif mode != "average":
        raise ConfigError(f"unknown pool mode {mode!r}")
    if not out_h or not out_w or out_h < 1 or out_w < 1:
        raise ConfigError(f"pool output extents must be positive, got ({out_h}, {out_w})")
    if h % out_h != 0 or w % out_w != 0:
        raise ShapeError(f"pool output ({out_h}, {out_w}) does not divide input ({h}, {w})")
    fh, fw = h // out_h, w // out_w
    data = x.data.reshape(n, c, out_h, fh, out_w, fw).mean(axis=(3, 5))

    def bwd(g):
        gg = g.reshape(n, c, out_h, 1, out_w, 1) / (fh * fw)
        return (np.broadcast_to(gg, (n, c, out_h, fh, out_w, fw)).reshape(n, c, h, w).copy(),)

    return Tensor._wrap(data, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization


def channel_norm(x, gain, bias, eps=1e-5):
    """Per-sample, per-channel normalization over H and W with learned affine.

    Statistics never cross the batch axis, so batch-size-1 gradients are
    exact and outputs do not depend on batch composition.
    """
    if x.ndim != 4:
        raise ShapeError(f"channel_norm expects a 4D tensor, got shape {x.shape}")
    mu = mean(x, axis=(2, 3), keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=(2, 3), keepdims=True)
    inv = pow_const(add(var, eps), -0.5)
    normed = mul(centered, inv)
    c = x.shape[1]
    return add(mul(normed, reshape(gain, (1, c, 1, 1))), reshape(bias, (1, c, 1, 1)))


def scale_channels(x, s):
    """Broadcast-multiply an N x C x 1 x 1 scale against an N x C x H x W map."""
    x, s = as_tensor(x), as_tensor(s)
    if x.ndim != 4 or s.ndim != 4 or s.shape[2:] != (1, 1):
        raise ShapeError(f"scale_channels expects NCHW and NC11, got {x.shape} and {s.shape}")
    if x.shape[1] != s.shape[1]:
        raise ShapeError(f"channel counts differ: {x.shape} vs {s.shape}")
    return mul(x, s)
