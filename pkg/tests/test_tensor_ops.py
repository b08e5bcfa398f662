"""Autodiff engine: op semantics, backward formulas, graph behavior."""

import numpy as np
import pytest

from srfseg.engine import ops
from srfseg.engine.gradcheck import grad_check
from srfseg.engine.tensor import Tensor, backward, get_dtype, precision
from srfseg.errors import ShapeError


def _grad(loss, *tensors):
    gmap = backward(loss)
    return [gmap[t.node_id].data for t in tensors]


# ---------------------------------------------------------------------------
# arithmetic and broadcasting


def test_add_broadcast_backward(rng):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3,)), requires_grad=True)
    ga, gb = _grad(ops.sum_(ops.add(a, b)), a, b)
    assert np.array_equal(ga, np.ones((2, 3), dtype=get_dtype()))
    assert np.array_equal(gb, np.full((3,), 2.0, dtype=get_dtype()))


def test_mul_backward_is_other_operand(rng):
    a = Tensor(rng.normal(size=(4,)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    ga, gb = _grad(ops.sum_(ops.mul(a, b)), a, b)
    assert np.allclose(ga, b.data)
    assert np.allclose(gb, a.data)


def test_div_and_pow_match_manual_derivatives(rng):
    with precision("float64"):
        a = Tensor(rng.uniform(1.0, 2.0, size=(5,)), requires_grad=True)
        b = Tensor(rng.uniform(1.0, 2.0, size=(5,)), requires_grad=True)
        ga, gb = _grad(ops.sum_(ops.div(a, b)), a, b)
        assert np.allclose(ga, 1.0 / b.data, atol=1e-12)
        assert np.allclose(gb, -a.data / b.data ** 2, atol=1e-12)
        (gp,) = _grad(ops.sum_(ops.pow_const(a, 3.0)), a)
        assert np.allclose(gp, 3.0 * a.data ** 2, atol=1e-12)


def test_matmul_backward_oracle(rng):
    with precision("float64"):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        w = rng.normal(size=(3, 2))
        loss = ops.sum_(ops.mul(ops.matmul(a, b), Tensor(w)))
        ga, gb = _grad(loss, a, b)
        assert np.allclose(ga, w @ b.data.T, atol=1e-12)
        assert np.allclose(gb, a.data.T @ w, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


# ---------------------------------------------------------------------------
# reductions and reshapes


def test_sum_and_mean_keepdims(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    s = ops.sum_(x, axis=1, keepdims=True)
    m = ops.mean(x, axis=(0, 2))
    assert s.shape == (2, 1, 4)
    assert np.allclose(s.data, x.data.sum(axis=1, keepdims=True))
    assert np.allclose(m.data, x.data.mean(axis=(0, 2)))


def test_mean_backward_divides_by_count(rng):
    x = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    (g,) = _grad(ops.mean(x), x)
    assert np.allclose(g, np.full((2, 6), 1.0 / 12.0))


def test_reshape_transpose_concat_roundtrip_gradients(rng):
    with precision("float64"):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        cat = ops.concat([a, b], axis=1)              # [2, 5]
        w = rng.normal(size=(5, 2))
        loss = ops.sum_(ops.mul(ops.transpose(cat, (1, 0)), Tensor(w)))
        ga, gb = _grad(loss, a, b)
        assert np.allclose(ga, w.T[:, :3], atol=1e-12)
        assert np.allclose(gb, w.T[:, 3:], atol=1e-12)


def test_take_rows_scatters_gradient(rng):
    x = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    idx = np.array([1, 3, 3])
    (g,) = _grad(ops.sum_(ops.take_rows(x, idx)), x)
    expect = np.zeros((5, 2))
    expect[1] = 1.0
    expect[3] = 2.0                                  # duplicate index accumulates
    assert np.array_equal(g, expect.astype(get_dtype()))


# ---------------------------------------------------------------------------
# nonlinearities


def test_softmax_rows_normalize_and_grad(rng):
    with precision("float64"):
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        p = ops.softmax(x, axis=1)
        assert np.allclose(p.data.sum(axis=1), 1.0, atol=1e-12)
        w = rng.normal(size=(4, 6))
        err = grad_check(lambda t: ops.sum_(ops.mul(ops.softmax(t, axis=1), Tensor(w))),
                         [x.data])
        assert err < 1e-6


def test_relu_sigmoid_values(rng):
    x = Tensor(np.array([-2.0, 0.0, 3.0]))
    assert np.array_equal(ops.relu(x).data, np.array([0.0, 0.0, 3.0], dtype=get_dtype()))
    s = ops.sigmoid(Tensor(np.array([0.0]))).data
    assert np.allclose(s, 0.5)


def test_log_exp_inverse_grad(rng):
    with precision("float64"):
        x = rng.uniform(0.5, 2.0, size=(6,))
        err = grad_check(lambda t: ops.sum_(ops.log(ops.exp(t))), [x])
        assert err < 1e-7


# ---------------------------------------------------------------------------
# conv, pool, norm


def _conv_oracle(x, w, b, stride, padding, groups):
    n, cin, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    per = cout // groups
    for bi in range(n):
        for co in range(cout):
            g = co // per
            for i in range(oh):
                for j in range(ow):
                    patch = xp[bi, g * cin_g:(g + 1) * cin_g,
                               i * stride:i * stride + k, j * stride:j * stride + k]
                    out[bi, co, i, j] = (patch * w[co]).sum() + (b[co] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,padding,groups", [(1, 0, 1), (2, 1, 1), (1, 1, 4)])
def test_conv2d_matches_loop_oracle(rng, stride, padding, groups):
    with precision("float64"):
        cin, cout = 4, 8
        x = rng.normal(size=(2, cin, 5, 6))
        w = rng.normal(size=(cout, cin // groups, 3, 3))
        b = rng.normal(size=(cout,))
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride,
                         padding=padding, groups=groups)
        assert np.allclose(got.data, _conv_oracle(x, w, b, stride, padding, groups),
                           atol=1e-12)


def test_conv2d_group_mismatch():
    from srfseg.errors import ConfigError
    with pytest.raises(ConfigError):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((4, 1, 3, 3))),
                   groups=2)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((4, 5, 3, 3))))


def test_pool2d_global_average(rng):
    x = rng.normal(size=(2, 3, 4, 6))
    out = ops.pool2d(Tensor(x), "global-average")
    assert out.shape == (2, 3, 1, 1)
    assert np.allclose(out.data[:, :, 0, 0], x.mean(axis=(2, 3)), atol=1e-6)


def test_pool2d_adaptive_average_covers_exactly(rng):
    x = rng.normal(size=(1, 2, 6, 4))
    out = ops.pool2d(Tensor(x), "average", 3, 2)
    expect = x.reshape(1, 2, 3, 2, 2, 2).mean(axis=(3, 5))
    assert np.allclose(out.data, expect, atol=1e-6)


def test_pool2d_indivisible_extents():
    with pytest.raises(ShapeError):
        ops.pool2d(Tensor(np.zeros((1, 1, 5, 4))), "average", 2, 2)


def test_channel_norm_standardizes_per_channel(rng):
    with precision("float64"):
        x = rng.normal(2.0, 3.0, size=(2, 3, 8, 8))
        gain = np.ones(3)
        bias = np.zeros(3)
        out = ops.channel_norm(Tensor(x), Tensor(gain), Tensor(bias)).data
        assert np.allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-12)
        assert np.allclose(out.var(axis=(2, 3)), 1.0, atol=1e-3)   # eps shifts variance


def test_channel_norm_batch_independence(rng):
    # statistics never cross the batch axis
    with precision("float64"):
        a = rng.normal(size=(1, 2, 4, 4))
        b = rng.normal(size=(1, 2, 4, 4))
        gain, bias = np.ones(2), np.zeros(2)
        solo = ops.channel_norm(Tensor(a), Tensor(gain), Tensor(bias)).data
        stacked = ops.channel_norm(Tensor(np.concatenate([a, b])), Tensor(gain),
                                   Tensor(bias)).data
        assert np.allclose(solo[0], stacked[0], atol=1e-12)


def test_scale_channels_broadcast(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    s = rng.uniform(0.1, 0.9, size=(2, 3, 1, 1))
    out = ops.scale_channels(Tensor(x), Tensor(s))
    assert np.allclose(out.data, x * s, atol=1e-6)
    with pytest.raises(ShapeError):
        ops.scale_channels(Tensor(x), Tensor(np.zeros((2, 4, 1, 1))))


# ---------------------------------------------------------------------------
# graph behavior


def test_reused_node_accumulates_gradient(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    y = ops.add(ops.mul(x, x), x)                    # d/dx = 2x + 1
    (g,) = _grad(ops.sum_(y), x)
    assert np.allclose(g, 2.0 * x.data + 1.0, atol=1e-6)


def test_backward_requires_scalar(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ops.mul(x, x))


def test_gradient_map_covers_every_input(rng):
    a = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    gmap = backward(ops.sum_(ops.mul(a, b)))
    assert gmap[a.node_id].shape == a.shape
    assert gmap[b.node_id].shape == b.shape


def test_constants_do_not_require_grad(rng):
    a = Tensor(rng.normal(size=(2,)), requires_grad=True)
    c = Tensor(rng.normal(size=(2,)))
    out = ops.sum_(ops.mul(a, c))
    gmap = backward(out)
    assert a.node_id in gmap
    assert c.node_id not in gmap


def test_precision_context_restores_dtype():
    assert get_dtype() == np.float32
    with precision("float64"):
        assert get_dtype() == np.float64
        assert Tensor(np.zeros(2, dtype=np.float32)).data.dtype == np.float64
    assert get_dtype() == np.float32


# ---------------------------------------------------------------------------
# the checker itself


def test_grad_check_accepts_correct_gradient(rng):
    w = rng.normal(size=(4, 3))
    err = grad_check(lambda t: ops.sum_(ops.mul(ops.relu(t), Tensor(w))),
                     [rng.normal(size=(4, 3)) + 0.3])
    assert err < 1e-7


def test_grad_check_flags_broken_gradient(rng):
    # a deliberately skewed backward must push the error past the threshold
    def broken(t):
        out = ops.mul(t, t)

        def bwd(g):
            return (g * (2.0 * t.data * 1.01),)      # 1 percent skew

        reattached = Tensor._wrap(out.data, (t,), bwd)
        return ops.sum_(reattached)

    err = grad_check(broken, [rng.uniform(0.5, 1.5, size=(5,))])
    assert err > 1e-4


def test_relu_passes_gradient_at_exactly_zero():
    # subgradient convention: an input sitting exactly on the kink still
    # propagates gradient, so zero-initialized branches can start training
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    (g,) = _grad(ops.sum_(ops.relu(x)), x)
    assert np.array_equal(g, np.array([0.0, 1.0, 1.0], dtype=get_dtype()))
