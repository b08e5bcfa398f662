"""End-to-end segmentation network.

A small four-stage convolutional encoder (strides 4, 8, 16, 32), an optional
context block on the coarsest feature, and a pyramid decoder whose three
upsampling steps are offset-refined (or plain bilinear, for the baseline
variant).  The head maps the stride-4 decoder feature to class logits, which
are bilinearly upsampled to input resolution.

Both variant axes are wired by parameter-name sharing: a layer that exists in
two variants has the same name and therefore the same seeded initialization,
which is what makes untrained variant comparisons meaningful.
"""

import numpy as np

from .crm import ContextBlock
from .engine import ops
from .engine.tensor import as_tensor
from .errors import ConfigError, ShapeError
from .sampler import bilinear_upsample
from .srm import OffsetUpsampler

UPSAMPLERS = ("bilinear", "srm")
CONTEXTS = ("none", "crm")


class NetworkConfig:
    """Validated architecture settings."""

    def __init__(self, num_classes=4, in_channels=3, stage_widths=(16, 32, 64, 128),
                 decoder_width=64, embedding_dim=256, blocks_per_stage=2):
        stage_widths = tuple(int(w) for w in stage_widths)
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        if len(stage_widths) != 4:
            raise ConfigError(f"exactly 4 stage widths required, got {stage_widths}")
        if any(b >= a for a, b in zip(stage_widths[1:], stage_widths)):
            raise ConfigError(f"stage widths must be strictly increasing, got {stage_widths}")
        if any(w % 4 for w in (*stage_widths, decoder_width)):
            raise ConfigError(f"all widths must be divisible by 4, got {stage_widths} / {decoder_width}")
        if blocks_per_stage < 0:
            raise ConfigError(f"blocks_per_stage must be >= 0, got {blocks_per_stage}")
        self.num_classes = int(num_classes)
        self.in_channels = int(in_channels)
        self.stage_widths = stage_widths
        self.decoder_width = int(decoder_width)
        self.embedding_dim = int(embedding_dim)
        self.blocks_per_stage = int(blocks_per_stage)

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "stage_widths": list(self.stage_widths),
            "decoder_width": self.decoder_width,
            "embedding_dim": self.embedding_dim,
            "blocks_per_stage": self.blocks_per_stage,
        }


class _ConvUnit:
    """conv3x3 (optionally strided) + per-channel norm + relu."""

    def __init__(self, store, name, cin, cout, stride=1):
        self.stride = stride
        p = store.add
        self.w = p(f"{name}.weight", (cout, cin, 3, 3))
        self.b = p(f"{name}.bias", (cout,), "zeros")
        self.g = p(f"{name}.norm_gain", (cout,), "ones")
        self.n = p(f"{name}.norm_bias", (cout,), "zeros")

    def forward(self, x):
        y = ops.conv2d(x, self.w, self.b, stride=self.stride, padding=1)
        return ops.relu(ops.channel_norm(y, self.g, self.n))


class _ResidualBlock:
    """x + norm(conv3x3(x)), then relu."""

    def __init__(self, store, name, channels):
        p = store.add
        self.w = p(f"{name}.weight", (channels, channels, 3, 3))
        self.b = p(f"{name}.bias", (channels,), "zeros")
        self.g = p(f"{name}.norm_gain", (channels,), "ones")
        self.n = p(f"{name}.norm_bias", (channels,), "zeros")

    def forward(self, x):
        y = ops.channel_norm(ops.conv2d(x, self.w, self.b, padding=1), self.g, self.n)
        return ops.relu(ops.add(x, y))


class SegmentationNet:
    """Encoder + context + offset-refined pyramid decoder + head."""

    def __init__(self, config, store, upsampler="srm", context="crm"):
        if upsampler not in UPSAMPLERS:
            raise ConfigError(f"upsampler must be one of {UPSAMPLERS}, got {upsampler!r}")
        if context not in CONTEXTS:
            raise ConfigError(f"context must be one of {CONTEXTS}, got {context!r}")
        self.config = config
        self.store = store
        self.upsampler = upsampler
        self.context = context
        w1, w2, w3, w4 = config.stage_widths
        dw = config.decoder_width

        self.stages = []
        prev = config.in_channels
        for l, width in enumerate(config.stage_widths, start=1):
            units = []
            if l == 1:
                units.append(_ConvUnit(store, "encoder.stage1.down1", prev, width, stride=2))
                units.append(_ConvUnit(store, "encoder.stage1.down2", width, width, stride=2))
            else:
                units.append(_ConvUnit(store, f"encoder.stage{l}.down", prev, width, stride=2))
            for b in range(config.blocks_per_stage):
                units.append(_ResidualBlock(store, f"encoder.stage{l}.block{b + 1}", width))
            self.stages.append(units)
            prev = width

        if context == "crm":
            self.context_block = ContextBlock(store, "context", config.stage_widths, dw)
        else:
            p = store.add
            self.proj_w = p("context_proj.weight", (dw, w4, 1, 1))
            self.proj_b = p("context_proj.bias", (dw,), "zeros")
            # zero gain matches the context block's init (both start dark)
            self.proj_g = p("context_proj.norm_gain", (dw,), "zeros")
            self.proj_n = p("context_proj.norm_bias", (dw,), "zeros")

        use_offsets = upsampler == "srm"
        self.up3 = OffsetUpsampler(store, "decoder.up3", dw, w3, width=dw, use_offsets=use_offsets)
        self.up2 = OffsetUpsampler(store, "decoder.up2", dw, w2, width=dw, use_offsets=use_offsets)
        self.up1 = OffsetUpsampler(store, "decoder.up1", dw, w1, width=dw, use_offsets=use_offsets)

        p = store.add
        self.head1_w = p("head.conv1.weight", (dw, dw, 1, 1))
        self.head1_b = p("head.conv1.bias", (dw,), "zeros")
        self.head1_g = p("head.norm_gain", (dw,), "ones")
        self.head1_n = p("head.norm_bias", (dw,), "zeros")
        self.head2_w = p("head.conv2.weight", (config.num_classes, dw, 1, 1))
        self.head2_b = p("head.conv2.bias", (config.num_classes,), "zeros")

    # ------------------------------------------------------------------

    def encode(self, image):
        """Image [N,3,H,W] -> pyramid [F_1..F_4] at strides 4..32."""
        image = as_tensor(image)
        if image.ndim != 4 or image.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected [N,{self.config.in_channels},H,W], got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input extents must be divisible by 32, got {(h, w)}")
        pyr = []
        x = image
        for units in self.stages:
            for u in units:
                x = u.forward(x)
            pyr.append(x)
        return pyr

    def context_forward(self, pyr):
        """Coarsest-level context feature at the decoder width."""
        if self.context == "crm":
            return self.context_block.forward(pyr)
        y = ops.conv2d(pyr[3], self.proj_w, self.proj_b)
        return ops.relu(ops.channel_norm(y, self.proj_g, self.proj_n))

    def decode(self, context, pyr, return_features=False):
        """Context + pyramid -> logits at input resolution."""
        g = context
        for up, lateral in ((self.up3, pyr[2]), (self.up2, pyr[1]), (self.up1, pyr[0])):
            g = up.forward(g, lateral)
        y = ops.conv2d(g, self.head1_w, self.head1_b)
        y = ops.relu(ops.channel_norm(y, self.head1_g, self.head1_n))
        logits = bilinear_upsample(ops.conv2d(y, self.head2_w, self.head2_b), 4)
        if return_features:
            return logits, g
        return logits

    def forward(self, image, return_features=False):
        pyr = self.encode(image)
        return self.decode(self.context_forward(pyr), pyr, return_features=return_features)

    def segment(self, image):
        """Predicted label map [N,H,W] (argmax; ties break to the lowest class)."""
        logits = self.forward(image)
        return np.argmax(logits.data, axis=1).astype(np.uint8)


def build_net(config, store, upsampler="srm", context="crm"):
    return SegmentationNet(config, store, upsampler=upsampler, context=context)
