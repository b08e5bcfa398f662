"""Offset-refined feature upsampling.

Fuses a coarse decoder feature with the next encoder lateral at 2x the
resolution.  Both streams are compressed to the decoder width by 1x1
convolutions; from their concatenation two small subnets predict a raw
2-channel offset field and a 9-way weight mask.  Each pixel's final offset is
the mask-weighted combination of the raw offsets over its 3x3 neighborhood,
the upsampled coarse stream is resampled at those offsets, and the result is
added to the compressed lateral.

The offset and mask heads are zero-initialized, so an untrained module is
exactly plain bilinear upsample-and-add; everything it learns is a deviation
from that baseline.  With `use_offsets=False` the subnets are dropped and the
module IS that baseline, sharing the compression weights by parameter name.
"""

import numpy as np

from .engine import ops
from .engine.tensor import Tensor, as_tensor
from .errors import ShapeError
from .sampler import bilinear_upsample, sample_with_offsets


def neighbor_stack(x):
    """Stack each pixel's 3x3 neighborhood: [N,C,H,W] -> [N,C,9,H,W].

    Neighbor index k runs row-major over the 3x3 window (k=4 is the pixel
    itself); out-of-image neighbors replicate the nearest edge pixel.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"neighbor_stack expects a 4D tensor, got shape {x.shape}")
    n, c, h, w = x.data.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    data = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c, 9, h, w)

    def bwd(g):
        gg = g.reshape(n, c, 3, 3, h, w)
        dxp = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
        for u in range(3):
            for v in range(3):
                dxp[:, :, u:u + h, v:v + w] += gg[:, :, u, v]
        # fold the replicated border back onto the edge rows/columns
        dxp[:, :, 1, :] += dxp[:, :, 0, :]
        dxp[:, :, h, :] += dxp[:, :, h + 1, :]
        core = dxp[:, :, 1:h + 1, :]
        core[:, :, :, 1] += core[:, :, :, 0]
        core[:, :, :, w] += core[:, :, :, w + 1]
        return (np.ascontiguousarray(core[:, :, :, 1:w + 1]),)

    return Tensor._wrap(data, (x,), bwd)


def refine_offsets(initial, mask):
    """Per-pixel weighted combination of neighboring raw offsets.

    out(i) = sum_k initial(neighbor_k(i)) * mask(k)(i), the same scalar
    weights applied to both offset channels.
    """
    initial, mask = as_tensor(initial), as_tensor(mask)
    if initial.ndim != 4 or mask.ndim != 4:
        raise ShapeError(f"expected 4D tensors, got {initial.shape} and {mask.shape}")
    if mask.shape[1] != 9:
        raise ShapeError(f"weight mask needs 9 channels, got shape {mask.shape}")
    if initial.shape[0] != mask.shape[0] or initial.shape[2:] != mask.shape[2:]:
        raise ShapeError(f"offset extents {initial.shape} do not match mask {mask.shape}")
    n, c, h, w = initial.shape
    stacked = neighbor_stack(initial)                       # [N, C, 9, H, W]
    weights = ops.reshape(mask, (n, 1, 9, h, w))
    return ops.sum_(ops.mul(stacked, weights), axis=2)


class OffsetUpsampler:
    """One decoder fusion step (parameters live in a shared ParamStore)."""

    def __init__(self, store, name, coarse_channels, lateral_channels,
                 width=64, subnet_width=64, use_offsets=True):
        self.name = name
        self.width = width
        self.use_offsets = use_offsets
        p = store.add
        self.cl_w = p(f"{name}.compress_coarse.weight", (width, coarse_channels, 1, 1))
        self.cl_b = p(f"{name}.compress_coarse.bias", (width,), "zeros")
        self.cl_g = p(f"{name}.compress_coarse.norm_gain", (width,), "ones")
        self.cl_n = p(f"{name}.compress_coarse.norm_bias", (width,), "zeros")
        self.cf_w = p(f"{name}.compress_lateral.weight", (width, lateral_channels, 1, 1))
        self.cf_b = p(f"{name}.compress_lateral.bias", (width,), "zeros")
        self.cf_g = p(f"{name}.compress_lateral.norm_gain", (width,), "ones")
        self.cf_n = p(f"{name}.compress_lateral.norm_bias", (width,), "zeros")
        if use_offsets:
            fa = 2 * width
            self.o1_w = p(f"{name}.offset.hidden.weight", (subnet_width, fa, 3, 3))
            self.o1_b = p(f"{name}.offset.hidden.bias", (subnet_width,), "zeros")
            self.o2_w = p(f"{name}.offset.final.weight", (2, subnet_width, 3, 3), "zeros")
            self.o2_b = p(f"{name}.offset.final.bias", (2,), "zeros")
            self.m1_w = p(f"{name}.mask.hidden.weight", (subnet_width, fa, 3, 3))
            self.m1_b = p(f"{name}.mask.hidden.bias", (subnet_width,), "zeros")
            self.m2_w = p(f"{name}.mask.final.weight", (9, subnet_width, 3, 3), "zeros")
            self.m2_b = p(f"{name}.mask.final.bias", (9,), "zeros")

    def _check_ratio(self, coarse, lateral):
        ch, cw = coarse.shape[2:]
        lh, lw = lateral.shape[2:]
        if lh != 2 * ch or lw != 2 * cw:
            raise ShapeError(
                f"lateral extents {(lh, lw)} must be exactly twice coarse extents {(ch, cw)}")

    def _compress(self, coarse, lateral):
        g = ops.relu(ops.channel_norm(ops.conv2d(coarse, self.cl_w, self.cl_b),
                                      self.cl_g, self.cl_n))
        f = ops.relu(ops.channel_norm(ops.conv2d(lateral, self.cf_w, self.cf_b),
                                      self.cf_g, self.cf_n))
        return g, f

    def _heads(self, up, f):
        fa = ops.concat([up, f], axis=1)
        raw = ops.conv2d(ops.relu(ops.conv2d(fa, self.o1_w, self.o1_b, padding=1)),
                         self.o2_w, self.o2_b, padding=1)
        logits = ops.conv2d(ops.relu(ops.conv2d(fa, self.m1_w, self.m1_b, padding=1)),
                            self.m2_w, self.m2_b, padding=1)
        return raw, ops.softmax(logits, axis=1)

    def predict(self, coarse, lateral):
        """Raw offsets [N,2,H,W] and softmax-normalized mask [N,9,H,W]."""
        self._check_ratio(coarse, lateral)
        g, f = self._compress(coarse, lateral)
        return self._heads(bilinear_upsample(g, 2), f)

    def forward(self, coarse, lateral):
        self._check_ratio(coarse, lateral)
        g, f = self._compress(coarse, lateral)
        up = bilinear_upsample(g, 2)
        if not self.use_offsets:
            return ops.add(up, f)
        raw, mask = self._heads(up, f)
        return ops.add(sample_with_offsets(up, refine_offsets(raw, mask)), f)
