"""Named registry of finite-difference gradient checks.

Every differentiable operator and every module forward gets a named entry;
`run_suite` compares backward() against 64-bit central differences and
reports the worst relative error per entry.  Probe objectives are random
fixed-weight linear functionals of the output: quadratic probes have
near-zero true gradients for normalized outputs, which drowns the
comparison in finite-difference round-off.

Inputs are conditioned away from kinks (relu at 0, sampling coordinates on
the integer lattice), since one-sided derivatives there are defined but
central differences straddle the crease.
"""

import numpy as np

from .crm import ChannelGate, ContextBlock, FeedForward, SpatialAttention
from .engine import ops
from .engine.gradcheck import grad_check
from .engine.params import ParamStore
from .engine.tensor import Tensor
from .losses import EmbeddingHead, contrastive_loss, cross_entropy, sample_anchors, total_loss
from .net import NetworkConfig, SegmentationNet
from .sampler import bilinear_upsample, sample_with_offsets
from .srm import OffsetUpsampler, neighbor_stack, refine_offsets

THRESHOLD = 1e-4

REGISTRY = []


def register(name):
    def deco(builder):
        REGISTRY.append((name, builder))
        return builder
    return deco


def _weighted(out, w):
    """Scalar probe: sum(out * w) with w a fixed constant."""
    return ops.sum_(ops.mul(out, Tensor(w)))


def _skew_gradient(t):
    # fault-injection hook: forward scales by 1.001, backward claims identity
    return Tensor._wrap(t.data * 1.001, (t,), lambda g: [g])


def _attach(param_tensor, wrapped):
    """Alias a stored parameter to a grad_check input tensor."""
    param_tensor.data = wrapped.data
    param_tensor._parents = (wrapped,)
    param_tensor._bwd = lambda g: [g]
    param_tensor.requires_grad = True


def _randomize(store, rng, scale=0.25, skip=()):
    for p in store:
        if p.name in skip:
            continue
        p.tensor.data = rng.normal(0.0, scale, size=p.tensor.data.shape)


# ---------------------------------------------------------------------------
# elementwise and shape operators


@register("add")
def _(rng):
    w = rng.normal(size=(3, 4))
    return (lambda a, b: _weighted(ops.add(a, b), w),
            [rng.normal(size=(3, 4)), rng.normal(size=(4,))], None)


@register("sub")
def _(rng):
    w = rng.normal(size=(3, 4))
    return (lambda a, b: _weighted(ops.sub(a, b), w),
            [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], None)


@register("mul")
def _(rng):
    w = rng.normal(size=(2, 3, 4))
    return (lambda a, b: _weighted(ops.mul(a, b), w),
            [rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 4))], None)


@register("div")
def _(rng):
    w = rng.normal(size=(3, 4))
    return (lambda a, b: _weighted(ops.div(a, b), w),
            [rng.normal(size=(3, 4)), rng.uniform(0.7, 1.6, size=(3, 4))], None)


@register("pow_const")
def _(rng):
    w = rng.normal(size=(3, 4))
    return (lambda a: _weighted(ops.pow_const(a, 1.7), w),
            [rng.uniform(0.5, 2.0, size=(3, 4))], None)


@register("exp")
def _(rng):
    w = rng.normal(size=(3, 4))
    return (lambda a: _weighted(ops.exp(a), w), [rng.uniform(-1, 1, size=(3, 4))], None)


@register("log")
def _(rng):
    w = rng.normal(size=(3, 4))
    return (lambda a: _weighted(ops.log(a), w), [rng.uniform(0.5, 2.0, size=(3, 4))], None)


@register("relu")
def _(rng):
    x = rng.uniform(-1, 1, size=(3, 4))
    x += 0.2 * np.sign(x)                       # keep coordinates off the kink
    w = rng.normal(size=(3, 4))
    return (lambda a: _weighted(ops.relu(a), w), [x], None)


@register("sigmoid")
def _(rng):
    w = rng.normal(size=(3, 4))
    return (lambda a: _weighted(ops.sigmoid(a), w), [rng.uniform(-2, 2, size=(3, 4))], None)


@register("softmax")
def _(rng):
    w = rng.normal(size=(2, 5))
    return (lambda a: _weighted(ops.softmax(a, axis=1), w), [rng.normal(size=(2, 5))], None)


@register("sum")
def _(rng):
    w = rng.normal(size=(1, 4))
    return (lambda a: _weighted(ops.sum_(a, axis=0, keepdims=True), w),
            [rng.normal(size=(3, 4))], None)


@register("mean")
def _(rng):
    w = rng.normal(size=(3,))
    return (lambda a: _weighted(ops.mean(a, axis=1), w), [rng.normal(size=(3, 4))], None)


@register("reshape")
def _(rng):
    w = rng.normal(size=(4, 3))
    return (lambda a: _weighted(ops.reshape(a, (4, 3)), w), [rng.normal(size=(3, 4))], None)


@register("transpose")
def _(rng):
    w = rng.normal(size=(4, 2, 3))
    return (lambda a: _weighted(ops.transpose(a, (2, 0, 1)), w),
            [rng.normal(size=(2, 3, 4))], None)


@register("concat")
def _(rng):
    w = rng.normal(size=(2, 5))
    return (lambda a, b: _weighted(ops.concat([a, b], axis=1), w),
            [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))], None)


@register("take_rows")
def _(rng):
    idx = np.array([0, 2, 2, 5])                # repeats exercise accumulation
    w = rng.normal(size=(4, 3))
    return (lambda a: _weighted(ops.take_rows(a, idx), w), [rng.normal(size=(6, 3))], None)


# ---------------------------------------------------------------------------
# linear algebra and convolution


@register("matmul_2d")
def _(rng):
    w = rng.normal(size=(3, 2))
    return (lambda a, b: _weighted(ops.matmul(a, b), w),
            [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], None)


@register("matmul_batched")
def _(rng):
    w = rng.normal(size=(2, 3, 2))
    return (lambda a, b: _weighted(ops.matmul(a, b), w),
            [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))], None)


@register("linear")
def _(rng):
    w = rng.normal(size=(3, 5))
    return (lambda x, wt, b: _weighted(ops.linear(x, wt, b), w),
            [rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5,))], None)


@register("conv2d_3x3")
def _(rng):
    w = rng.normal(size=(2, 4, 3, 3))
    return (lambda x, wt, b: _weighted(ops.conv2d(x, wt, b, stride=2, padding=1), w),
            [rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)) * 0.5,
             rng.normal(size=(4,))], None)


@register("conv2d_1x1")
def _(rng):
    w = rng.normal(size=(2, 4, 5, 5))
    return (lambda x, wt, b: _weighted(ops.conv2d(x, wt, b), w),
            [rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 1, 1)),
             rng.normal(size=(4,))], None)


@register("conv2d_depthwise")
def _(rng):
    w = rng.normal(size=(2, 4, 5, 5))
    return (lambda x, wt: _weighted(ops.conv2d(x, wt, padding=1, groups=4), w),
            [rng.normal(size=(2, 4, 5, 5)), rng.normal(size=(4, 1, 3, 3)) * 0.5], None)


@register("conv2d_grouped")
def _(rng):
    w = rng.normal(size=(1, 6, 5, 5))
    return (lambda x, wt: _weighted(ops.conv2d(x, wt, padding=1, groups=2), w),
            [rng.normal(size=(1, 4, 5, 5)), rng.normal(size=(6, 2, 3, 3)) * 0.5], None)


@register("pool2d_average")
def _(rng):
    w = rng.normal(size=(1, 3, 2, 2))
    return (lambda x: _weighted(ops.pool2d(x, "average", 2, 2), w),
            [rng.normal(size=(1, 3, 4, 4))], None)


@register("pool2d_global")
def _(rng):
    w = rng.normal(size=(2, 3, 1, 1))
    return (lambda x: _weighted(ops.pool2d(x, "global-average"), w),
            [rng.normal(size=(2, 3, 4, 4))], None)


@register("channel_norm")
def _(rng):
    w = rng.normal(size=(2, 3, 4, 4))
    return (lambda x, g, b: _weighted(ops.channel_norm(x, g, b), w),
            [rng.normal(size=(2, 3, 4, 4)), rng.uniform(0.5, 1.5, size=(3,)),
             rng.normal(size=(3,))], None)


@register("scale_channels")
def _(rng):
    w = rng.normal(size=(2, 3, 4, 4))
    return (lambda x, s: _weighted(ops.scale_channels(x, s), w),
            [rng.normal(size=(2, 3, 4, 4)), rng.uniform(0.2, 1.0, size=(2, 3, 1, 1))], None)


# ---------------------------------------------------------------------------
# sampling and refinement modules


@register("bilinear_upsample")
def _(rng):
    w = rng.normal(size=(1, 3, 8, 8))
    return (lambda x: _weighted(bilinear_upsample(x, 2), w),
            [rng.normal(size=(1, 3, 4, 4))], None)


def _mid_cell_offsets(rng, shape):
    # integer part anywhere, fractional part well inside the cell
    return rng.integers(-2, 3, size=shape) + rng.uniform(0.15, 0.85, size=shape)


@register("sample_with_offsets")
def _(rng):
    off = _mid_cell_offsets(rng, (1, 2, 5, 5))
    w = rng.normal(size=(1, 3, 5, 5))
    return (lambda x, o: _weighted(sample_with_offsets(x, o), w),
            [rng.normal(size=(1, 3, 5, 5)), off], None)


@register("neighbor_stack")
def _(rng):
    w = rng.normal(size=(1, 2, 9, 4, 4))
    return (lambda x: _weighted(neighbor_stack(x), w), [rng.normal(size=(1, 2, 4, 4))], None)


@register("refine_offsets")
def _(rng):
    w = rng.normal(size=(1, 2, 4, 4))
    return (lambda o, m: _weighted(refine_offsets(o, m), w),
            [rng.normal(size=(1, 2, 4, 4)), rng.uniform(0.05, 1.0, size=(1, 9, 4, 4))], None)


@register("srm_forward")
def _(rng):
    store = ParamStore(0)
    mod = OffsetUpsampler(store, "up", coarse_channels=6, lateral_channels=4,
                          width=8, subnet_width=8)
    _randomize(store, rng, skip=("up.offset.final.weight", "up.offset.final.bias"))
    # offsets must vary (constant offsets null the mask gradient) yet stay
    # mid-cell, clear of the sampling lattice where central differences break
    wshape = store.get("up.offset.final.weight").data.shape
    store.get("up.offset.final.weight").data = rng.normal(0.0, 0.01, size=wshape)
    store.get("up.offset.final.bias").data = np.array([0.37, -0.41])
    coarse = rng.normal(size=(1, 6, 4, 4))
    lateral = rng.normal(size=(1, 4, 8, 8))
    wp = store.get("up.compress_coarse.weight")
    wo = store.get("up.offset.final.weight")
    wm = store.get("up.mask.final.weight")
    w = rng.normal(size=(1, 8, 8, 8))

    def f(c, l, a, b, m):
        _attach(wp, a)
        _attach(wo, b)
        _attach(wm, m)
        return _weighted(mod.forward(c, l), w)

    return (f, [coarse, lateral, wp.data.copy(), wo.data.copy(), wm.data.copy()], 24)


@register("channel_gate")
def _(rng):
    widths = (4, 8, 12, 16)
    store = ParamStore(0)
    gate = ChannelGate(store, "gate", widths)
    _randomize(store, rng, scale=0.4)
    stages = [rng.normal(size=(1, c, e, e)) for c, e in zip(widths, (16, 8, 4, 2))]
    wf = store.get("gate.fuse.fc2.weight")
    w = rng.normal(size=(1, sum(widths), 1, 1))

    def f(s0, s1, s2, s3, a):
        _attach(wf, a)
        return _weighted(gate.forward([s0, s1, s2, s3]), w)

    return (f, stages + [wf.data.copy()], 24)


@register("spatial_attention")
def _(rng):
    store = ParamStore(0)
    attn = SpatialAttention(store, "attn", channels=8)
    _randomize(store, rng, scale=0.4)
    x = rng.normal(size=(1, 8, 3, 3))
    wq = store.get("attn.query.weight")
    wu = store.get("attn.unary.weight")
    wp = store.get("attn.project.weight")
    w = rng.normal(size=(1, 8, 3, 3))

    def f(xi, q, u, pr):
        _attach(wq, q)
        _attach(wu, u)
        _attach(wp, pr)
        return _weighted(attn.forward(xi), w)

    return (f, [x, wq.data.copy(), wu.data.copy(), wp.data.copy()], 32)


@register("feed_forward")
def _(rng):
    store = ParamStore(0)
    ffn = FeedForward(store, "ffn", channels=4)
    _randomize(store, rng, scale=0.4)
    x = rng.normal(size=(1, 4, 3, 3))
    we = store.get("ffn.expand.weight")
    wc = store.get("ffn.contract.weight")
    w = rng.normal(size=(1, 4, 3, 3))

    def f(xi, a, b):
        _attach(we, a)
        _attach(wc, b)
        return _weighted(ffn.forward(xi), w)

    return (f, [x, we.data.copy(), wc.data.copy()], 32)


@register("context_block")
def _(rng):
    widths = (4, 8, 12, 16)
    store = ParamStore(0)
    block = ContextBlock(store, "ctx", widths, width=8)
    _randomize(store, rng, scale=0.3)
    stages = [rng.normal(size=(1, c, e, e)) for c, e in zip(widths, (16, 8, 4, 2))]
    wr = store.get("ctx.reduce.weight")
    wg = store.get("ctx.reduce.norm_gain")
    wv = store.get("ctx.spatial.value.weight")
    w = rng.normal(size=(1, 8, 2, 2))

    def f(s0, s1, s2, s3, a, b, c):
        _attach(wr, a)
        _attach(wg, b)
        _attach(wv, c)
        return _weighted(block.forward([s0, s1, s2, s3]), w)

    return (f, stages + [wr.data.copy(), wg.data.copy(), wv.data.copy()], 10)


# ---------------------------------------------------------------------------
# losses


@register("cross_entropy")
def _(rng):
    logits = rng.normal(size=(1, 4, 4, 4))
    labels = rng.integers(0, 4, size=(1, 4, 4)).astype(np.int64)
    labels[0, 0, 0] = 255
    return (lambda z: cross_entropy(z, labels), [logits], None)


@register("contrastive_loss")
def _(rng):
    store = ParamStore(0)
    head = EmbeddingHead(store, "emb", in_channels=6, dim=8)
    _randomize(store, rng, scale=0.4)
    feat = rng.normal(size=(1, 6, 4, 4))
    labels = rng.integers(0, 3, size=(1, 4, 4)).astype(np.int64)
    preds = rng.integers(0, 3, size=(1, 4, 4)).astype(np.int64)
    wh = store.get("emb.weight")

    def f(x, a):
        _attach(wh, a)
        anchors = sample_anchors(head.forward(x), labels, preds, budget=12, seed=5)
        return contrastive_loss(anchors, tau=0.5)

    return (f, [feat, wh.data.copy()], 24)


@register("seg_net_total_loss")
def _(rng):
    cfg = NetworkConfig()
    store = ParamStore(0)
    net = SegmentationNet(cfg, store, upsampler="srm", context="crm")
    head = EmbeddingHead(store, "embed", cfg.decoder_width, dim=cfg.embedding_dim)
    skip = tuple(f"decoder.up{k}.offset.final.{leaf}"
                 for k in (1, 2, 3) for leaf in ("weight", "bias"))
    _randomize(store, rng, scale=0.1, skip=skip)
    for k in (1, 2, 3):
        wt = store.get(f"decoder.up{k}.offset.final.weight")
        wt.data = rng.normal(0.0, 0.01, size=wt.data.shape)
        store.get(f"decoder.up{k}.offset.final.bias").data = np.array([0.37, -0.41])

    image = rng.uniform(0.0, 1.0, size=(1, 3, 64, 64))
    labels = rng.integers(0, cfg.num_classes, size=(1, 64, 64)).astype(np.int64)
    labels[0, :2, :2] = 255
    lab4 = labels[:, 2::4, 2::4]
    preds4 = rng.integers(0, cfg.num_classes, size=lab4.shape).astype(np.int64)

    probes = ["encoder.stage1.down1.weight", "encoder.stage3.block1.weight",
              "context.gate.fuse.fc2.weight", "context.reduce.norm_gain",
              "context.spatial.value.weight", "context.ffn.expand.weight",
              "decoder.up2.offset.final.weight", "decoder.up1.mask.hidden.weight",
              "decoder.up3.compress_lateral.weight", "head.conv2.weight",
              "embed.weight"]
    tensors = [store.get(n) for n in probes]

    def f(img, *ws):
        for pt, wt in zip(tensors, ws):
            _attach(pt, wt)
        logits, feat = net.forward(img, return_features=True)
        ce = cross_entropy(logits, labels)
        anchors = sample_anchors(head.forward(feat), lab4, preds4, budget=32, seed=3)
        cl = contrastive_loss(anchors, tau=0.5)
        return total_loss(ce, cl).total

    return (f, [image] + [t.data.copy() for t in tensors], 3)


# ---------------------------------------------------------------------------


def run_suite(names=None, seed=0, corrupt=None, eps=1e-5):
    """Run registered checks; returns [(name, max_rel_error, passed)]."""
    rows = []
    for name, builder in REGISTRY:
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, len(name), 7]))
        f, inputs, sample = builder(rng)
        probe = f
        if corrupt == name:
            probe = lambda *ts: _skew_gradient(f(*ts))
        err = grad_check(probe, inputs, eps=eps, sample=sample, seed=seed)
        rows.append((name, err, err < THRESHOLD))
    return rows


def format_rows(rows):
    lines = [f"{'target':<24} {'max_rel_error':<14} status"]
    for name, err, ok in rows:
        lines.append(f"{name:<24} {err:<14.3e} {'ok' if ok else 'FAIL'}")
    worst = max((e for _, e, _ in rows), default=0.0)
    lines.append(f"{len(rows)} targets, worst {worst:.3e}, threshold {THRESHOLD:g}")
    return "\n".join(lines)
