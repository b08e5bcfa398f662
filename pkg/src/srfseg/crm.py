"""Context refinement over the encoder pyramid.

Serial pipeline at the coarsest resolution: (1) gate the channels of a
pooled concatenation of all four stages with per-channel scales predicted
from global stage statistics, (2) reduce to the decoder width, (3) apply
whitened pairwise-plus-unary spatial attention over all positions, and
(4) a pointwise/depthwise feed-forward block.  Steps 3 and 4 are residual,
and their final projections start at zero, so the untrained block is a
gated channel reduction and everything after is a learned correction.

The serial order is deliberate: the channel gate sits inside the gradient
path of the spatial attention, so each attention conditions the other's
updates rather than being summed independently.
"""

import numpy as np

from .engine import ops
from .errors import ConfigError, ShapeError


def concat_pyramid(stages):
    """Pool every stage to the coarsest extents and concatenate channels.

    `stages` is the list [F_1..F_4], finest first; F_4 sets the target size.
    """
    if len(stages) != 4:
        raise ShapeError(f"expected 4 pyramid stages, got {len(stages)}")
    target_h, target_w = stages[-1].shape[2:]
    pooled = []
    for f in stages[:-1]:
        h, w = f.shape[2:]
        if h % target_h != 0 or w % target_w != 0:
            raise ShapeError(
                f"stage extents {(h, w)} not divisible by coarsest extents {(target_h, target_w)}")
        pooled.append(ops.pool2d(f, "average", target_h, target_w))
    pooled.append(stages[-1])
    return ops.concat(pooled, axis=1)


def apply_channel_attention(fc, scale):
    """Per-channel broadcast multiply of the concatenated feature."""
    return ops.scale_channels(fc, scale)


def _mlp_hidden(c):
    return max(c // 4, 8)


class ChannelGate:
    """Per-channel scales in (0,1) from globally pooled stage statistics.

    Each stage is pooled to a channel vector and passed through its own
    two-layer MLP; the concatenated results go through a fused two-layer
    MLP sized to the total channel count, then a sigmoid.
    """

    def __init__(self, store, name, stage_widths):
        self.stage_widths = tuple(stage_widths)
        total = sum(stage_widths)
        self.total = total
        p = store.add
        self.stage_mlps = []
        for i, c in enumerate(stage_widths):
            h = _mlp_hidden(c)
            self.stage_mlps.append((
                p(f"{name}.stage{i + 1}.fc1.weight", (c, h)),
                p(f"{name}.stage{i + 1}.fc1.bias", (h,), "zeros"),
                p(f"{name}.stage{i + 1}.fc2.weight", (h, c)),
                p(f"{name}.stage{i + 1}.fc2.bias", (c,), "zeros"),
            ))
        h = _mlp_hidden(total)
        self.fuse_w1 = p(f"{name}.fuse.fc1.weight", (total, h))
        self.fuse_b1 = p(f"{name}.fuse.fc1.bias", (h,), "zeros")
        self.fuse_w2 = p(f"{name}.fuse.fc2.weight", (h, total))
        self.fuse_b2 = p(f"{name}.fuse.fc2.bias", (total,), "zeros")

    def forward(self, stages):
        if tuple(f.shape[1] for f in stages) != self.stage_widths:
            raise ShapeError(
                f"stage widths {tuple(f.shape[1] for f in stages)} != configured {self.stage_widths}")
        descriptors = []
        for f, (w1, b1, w2, b2) in zip(stages, self.stage_mlps):
            n, c = f.shape[0], f.shape[1]
            v = ops.reshape(ops.pool2d(f, "global-average"), (n, c))
            descriptors.append(ops.linear(ops.relu(ops.linear(v, w1, b1)), w2, b2))
        cat = ops.concat(descriptors, axis=1)
        fused = ops.linear(ops.relu(ops.linear(cat, self.fuse_w1, self.fuse_b1)),
                           self.fuse_w2, self.fuse_b2)
        n = cat.shape[0]
        return ops.reshape(ops.sigmoid(fused), (n, self.total, 1, 1))


class SpatialAttention:
    """Whitened pairwise plus unary attention over all spatial positions.

    Queries and keys (width C/4) are mean-centered over positions before the
    pairwise product, the unary term is a single-channel map, both logits are
    softmax-normalized over positions (so every query's weights sum to 2),
    and the attended values pass through a zero-initialized projection back
    onto the input as a residual.
    """

    def __init__(self, store, name, channels):
        if channels % 4 != 0:
            raise ConfigError(f"attention channel count must be divisible by 4, got {channels}")
        self.channels = channels
        reduced = channels // 4
        p = store.add
        self.q_w = p(f"{name}.query.weight", (reduced, channels, 1, 1))
        self.k_w = p(f"{name}.key.weight", (reduced, channels, 1, 1))
        self.m_w = p(f"{name}.unary.weight", (1, channels, 1, 1))
        self.g_w = p(f"{name}.value.weight", (channels, channels, 1, 1))
        self.out_w = p(f"{name}.project.weight", (channels, channels, 1, 1), "zeros")
        self.out_b = p(f"{name}.project.bias", (channels,), "zeros")

    def weights(self, x):
        """The [N, HW, HW] attention map (each row sums to 2)."""
        n, c, h, w = x.shape
        hw = h * w
        q = ops.reshape(ops.conv2d(x, self.q_w), (n, c // 4, hw))
        k = ops.reshape(ops.conv2d(x, self.k_w), (n, c // 4, hw))
        m = ops.reshape(ops.conv2d(x, self.m_w), (n, 1, hw))
        q = ops.sub(q, ops.mean(q, axis=2, keepdims=True))
        k = ops.sub(k, ops.mean(k, axis=2, keepdims=True))
        pair = ops.matmul(ops.transpose(q, (0, 2, 1)), k)     # [N, HW, HW]
        return ops.add(ops.softmax(pair, axis=2), ops.softmax(m, axis=2))

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got shape {x.shape}")
        n, c, h, w = x.shape
        hw = h * w
        omega = self.weights(x)
        g = ops.reshape(ops.conv2d(x, self.g_w), (n, c, hw))
        y = ops.matmul(omega, ops.transpose(g, (0, 2, 1)))    # [N, HW, C]
        y = ops.reshape(ops.transpose(y, (0, 2, 1)), (n, c, h, w))
        return ops.add(x, ops.conv2d(y, self.out_w, self.out_b))


class FeedForward:
    """Pointwise expand, depthwise 3x3, relu, pointwise contract, residual."""

    def __init__(self, store, name, channels, expansion=2):
        self.channels = channels
        hidden = channels * expansion
        p = store.add
        self.w1 = p(f"{name}.expand.weight", (hidden, channels, 1, 1))
        self.b1 = p(f"{name}.expand.bias", (hidden,), "zeros")
        self.wd = p(f"{name}.depthwise.weight", (hidden, 1, 3, 3))
        self.bd = p(f"{name}.depthwise.bias", (hidden,), "zeros")
        self.w2 = p(f"{name}.contract.weight", (channels, hidden, 1, 1), "zeros")
        self.b2 = p(f"{name}.contract.bias", (channels,), "zeros")
        self.hidden = hidden

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got shape {x.shape}")
        t = ops.conv2d(x, self.w1, self.b1)
        t = ops.relu(ops.conv2d(t, self.wd, self.bd, padding=1, groups=self.hidden))
        return ops.add(x, ops.conv2d(t, self.w2, self.b2))


class ContextBlock:
    """Channel gate -> width reduction -> spatial attention -> feed-forward."""

    def __init__(self, store, name, stage_widths, width):
        total = sum(stage_widths)
        self.gate = ChannelGate(store, f"{name}.gate", stage_widths)
        p = store.add
        self.red_w = p(f"{name}.reduce.weight", (width, total, 1, 1))
        self.red_b = p(f"{name}.reduce.bias", (width,), "zeros")
        # zero gain: context output starts at exactly 0, so variants agree at init
        self.red_g = p(f"{name}.reduce.norm_gain", (width,), "zeros")
        self.red_n = p(f"{name}.reduce.norm_bias", (width,), "zeros")
        self.attn = SpatialAttention(store, f"{name}.spatial", width)
        self.ffn = FeedForward(store, f"{name}.ffn", width)

    def forward(self, stages):
        fc = concat_pyramid(stages)
        gated = apply_channel_attention(fc, self.gate.forward(stages))
        reduced = ops.relu(ops.channel_norm(
            ops.conv2d(gated, self.red_w, self.red_b), self.red_g, self.red_n))
        return self.ffn.forward(self.attn.forward(reduced))
