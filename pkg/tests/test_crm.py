"""Context block: channel gating, disentangled spatial attention, FFN."""

import numpy as np
import pytest

from srfseg.crm import (ChannelGate, ContextBlock, FeedForward, SpatialAttention,
                        apply_channel_attention, concat_pyramid)
from srfseg.engine.params import ParamStore
from srfseg.engine.tensor import Tensor, backward, precision
from srfseg.engine import ops
from srfseg.errors import ConfigError, ShapeError


def _pyramid(rng, widths=(8, 16, 32, 64), extents=(16, 8, 4, 2), n=1):
    return [Tensor(rng.normal(size=(n, c, e, e))) for c, e in zip(widths, extents)]


# ---------------------------------------------------------------------------
# pyramid concatenation and gating


def test_concat_pyramid_width_arithmetic(rng):
    out = concat_pyramid(_pyramid(rng))
    assert out.shape == (1, 120, 2, 2)


def test_concat_pyramid_pools_block_means(rng):
    with precision("float64"):
        stages = _pyramid(rng)
        out = concat_pyramid(stages).data
        f1 = stages[0].data                          # 16x16 pooled to 2x2
        expect = f1.reshape(1, 8, 2, 8, 2, 8).mean(axis=(3, 5))
        assert np.allclose(out[:, :8], expect, atol=1e-12)
        assert np.array_equal(out[:, -64:], stages[-1].data)


def test_concat_pyramid_rejects_indivisible_extents(rng):
    stages = _pyramid(rng)
    stages[0] = Tensor(rng.normal(size=(1, 8, 15, 15)))
    with pytest.raises(ShapeError, match="divisible"):
        concat_pyramid(stages)


def test_concat_pyramid_needs_four_stages(rng):
    with pytest.raises(ShapeError, match="4 pyramid stages"):
        concat_pyramid(_pyramid(rng)[:3])


def test_channel_gate_outputs_open_interval(rng):
    store = ParamStore(seed=1)
    gate = ChannelGate(store, "gate", (8, 16, 32, 64))
    scale = gate.forward(_pyramid(rng)).data
    assert scale.shape == (1, 120, 1, 1)
    assert np.all(scale > 0.0) and np.all(scale < 1.0)


def test_channel_attention_is_contractive(rng):
    x = rng.normal(size=(1, 4, 3, 3)).astype(np.float32)
    s = rng.uniform(0.01, 0.99, size=(1, 4, 1, 1)).astype(np.float32)
    out = apply_channel_attention(Tensor(x), Tensor(s)).data
    assert np.all(np.abs(out) <= np.abs(x))


# ---------------------------------------------------------------------------
# spatial attention


def test_attention_rows_sum_to_two(rng):
    with precision("float64"):
        store = ParamStore(seed=2)
        attn = SpatialAttention(store, "sa", 8)
        x = Tensor(rng.normal(size=(2, 8, 4, 5)))
        w = attn.weights(x).data                     # [N, HW, HW]
        assert np.abs(w.sum(axis=2) - 2.0).max() < 1e-6


def test_attention_two_pixel_hand_oracle(rng):
    with precision("float64"):
        store = ParamStore(seed=4)
        attn = SpatialAttention(store, "sa", 8)
        x = rng.normal(size=(1, 8, 1, 2))
        got = attn.weights(Tensor(x)).data[0]

        wq = store.get("sa.query.weight").data[:, :, 0, 0]
        wk = store.get("sa.key.weight").data[:, :, 0, 0]
        wm = store.get("sa.unary.weight").data[:, :, 0, 0]
        feats = x[0, :, 0, :]                        # [C, 2]
        q = wq @ feats
        k = wk @ feats
        m = (wm @ feats)[0]
        q = q - q.mean(axis=1, keepdims=True)
        k = k - k.mean(axis=1, keepdims=True)
        pair = q.T @ k                               # [2, 2]
        exp_pair = np.exp(pair - pair.max(axis=1, keepdims=True))
        soft_pair = exp_pair / exp_pair.sum(axis=1, keepdims=True)
        exp_m = np.exp(m - m.max())
        soft_m = exp_m / exp_m.sum()
        expect = soft_pair + soft_m[None, :]
        assert np.abs(got - expect).max() < 1e-10


def test_attention_whitening_shift_invariance(rng):
    # adding one constant vector to every position leaves the weights alone:
    # the pairwise term is mean-centered and the unary softmax is shift-free
    with precision("float64"):
        store = ParamStore(seed=5)
        attn = SpatialAttention(store, "sa", 8)
        x = rng.normal(size=(1, 8, 3, 4))
        shift = rng.normal(size=(1, 8, 1, 1))
        a = attn.weights(Tensor(x)).data
        b = attn.weights(Tensor(x + shift)).data
        assert np.abs(a - b).max() < 1e-6


def test_attention_projection_starts_residual(rng):
    store = ParamStore(seed=6)
    attn = SpatialAttention(store, "sa", 8)
    x = rng.normal(size=(1, 8, 3, 3)).astype(np.float32)
    out = attn.forward(Tensor(x)).data               # zero-init projection
    assert np.array_equal(out, x)


def test_attention_channel_width_validation():
    with pytest.raises(ConfigError, match="divisible by 4"):
        SpatialAttention(ParamStore(), "sa", 6)
    attn = SpatialAttention(ParamStore(), "sa2", 8)
    with pytest.raises(ShapeError):
        attn.forward(Tensor(np.zeros((1, 12, 2, 2), dtype=np.float32)))


def test_attention_single_pixel_extent_well_formed(rng):
    store = ParamStore(seed=7)
    attn = SpatialAttention(store, "sa", 8)
    out = attn.forward(Tensor(rng.normal(size=(1, 8, 1, 1)).astype(np.float32)))
    assert out.shape == (1, 8, 1, 1)
    assert np.all(np.isfinite(out.data))


# ---------------------------------------------------------------------------
# feed-forward and the assembled block


def test_ffn_zero_init_is_identity(rng):
    store = ParamStore(seed=8)
    ffn = FeedForward(store, "ffn", 8)
    x = rng.normal(size=(1, 8, 4, 4)).astype(np.float32)
    assert np.array_equal(ffn.forward(Tensor(x)).data, x)


def test_ffn_departs_after_contract_weights_move(rng):
    store = ParamStore(seed=9)
    ffn = FeedForward(store, "ffn", 8)
    ffn.w2.data = rng.normal(0.0, 0.3, size=ffn.w2.shape).astype(np.float32)
    x = rng.normal(size=(1, 8, 4, 4)).astype(np.float32)
    assert np.abs(ffn.forward(Tensor(x)).data - x).max() > 1e-4


def test_context_block_zero_gain_output_is_exactly_zero(rng):
    # the reduction norm gain starts at zero, so the whole block reports 0
    # and every decoder variant sees the same bottleneck at initialization
    store = ParamStore(seed=10)
    block = ContextBlock(store, "ctx", (8, 16, 32, 64), 8)
    out = block.forward(_pyramid(rng)).data
    assert np.array_equal(out, np.zeros_like(out))


def test_context_block_gradient_reaches_gate_through_attention(rng):
    # serial wiring: with generic weights, a probe on the block output moves
    # the channel-gate parameters, i.e. the gate sits inside the spatial
    # attention's gradient path rather than on a parallel branch
    with precision("float64"):
        store = ParamStore(seed=11)
        block = ContextBlock(store, "ctx", (8, 16, 32, 64), 8)
        gen = np.random.default_rng(3)
        for p in store:
            p.tensor.data = gen.normal(0.0, 0.3, size=p.data.shape)
        out = block.forward(_pyramid(rng))
        probe = Tensor(gen.normal(size=out.shape))
        gmap = backward(ops.sum_(ops.mul(out, probe)))
        g = gmap[store.get("ctx.gate.fuse.fc1.weight").node_id].data
        assert np.abs(g).max() > 1e-8


def test_context_block_coarsest_extent_one_is_well_formed(rng):
    # a 32x32 input leaves the coarsest stage at 1x1
    store = ParamStore(seed=12)
    block = ContextBlock(store, "ctx", (8, 16, 32, 64), 8)
    stages = _pyramid(rng, extents=(8, 4, 2, 1))
    out = block.forward(stages)
    assert out.shape == (1, 8, 1, 1)
    assert np.all(np.isfinite(out.data))
