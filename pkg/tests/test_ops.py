import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bpfpn_lab import ops
from bpfpn_lab.errors import ContractError, ShapeError
from bpfpn_lab.graph import Graph, Parameter
from bpfpn_lab.tensor import Rng


def conv_oracle(x, w, b):
    """Direct six-loop cross-correlation with zero 'same' padding."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    pad = (k - 1) // 2
    y = np.zeros((n, o, h, wd))
    for i in range(n):
        for oc in range(o):
            for yy in range(h):
                for xx in range(wd):
                    acc = b[0, oc, 0, 0]
                    for ic in range(c):
                        for dy in range(k):
                            for dx in range(k):
                                sy, sx = yy + dy - pad, xx + dx - pad
                                if 0 <= sy < h and 0 <= sx < wd:
                                    acc += x[i, ic, sy, sx] * w[oc, ic, dy, dx]
                    y[i, oc, yy, xx] = acc
    return y


def weights(out_c, in_c, k, seed=0):
    return ops.ConvWeights.init("t", out_c, in_c, k, Rng(seed))


def test_conv_identity_1x1():
    w = weights(3, 3, 1)
    w.weight.value = np.eye(3).reshape(3, 3, 1, 1)
    g = Graph()
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    y = ops.conv2d(g, g.input(x), w)
    assert np.array_equal(g.value(y), x)


def test_conv_matches_loop_oracle():
    w = weights(4, 3, 3)
    w.bias.value = np.random.default_rng(2).normal(size=w.bias.value.shape)
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
    g = Graph()
    y = g.value(ops.conv2d(g, g.input(x), w))
    assert np.abs(y - conv_oracle(x, w.weight.value, w.bias.value)).max() < 1e-12


def test_conv_channel_mismatch():
    g = Graph()
    with pytest.raises(ShapeError):
        ops.conv2d(g, g.input(np.ones((1, 2, 4, 4))), weights(4, 3, 3))


def test_conv_flops_meta():
    g = Graph()
    y = ops.conv2d_nobias(g, g.input(np.ones((1, 3, 4, 4))), weights(5, 3, 3).weight)
    assert g.nodes[y].meta["flops"] == 2 * 5 * 4 * 4 * 3 * 9


def test_he_init_std():
    w = ops.ConvWeights.init("big", 64, 64, 3, Rng(0))
    assert abs(w.weight.value.std() / math.sqrt(2 / (64 * 9)) - 1) < 0.03
    assert not w.bias.value.any()


def test_space_to_depth_order():
    g = Graph()
    y = ops.space_to_depth2(g, g.input(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    assert g.value(y).ravel().tolist() == [1.0, 2.0, 3.0, 4.0]
    assert g.value(y).shape == (1, 4, 1, 1)


def test_depth_to_space_order():
    g = Graph()
    y = ops.depth_to_space2(g, g.input(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)))
    assert g.value(y).tolist() == [[[[1.0, 2.0], [3.0, 4.0]]]]


def test_depth_to_space_bad_channels():
    g = Graph()
    with pytest.raises(ShapeError):
        ops.depth_to_space2(g, g.input(np.ones((1, 3, 2, 2))))


def test_space_to_depth_odd():
    g = Graph()
    with pytest.raises(ShapeError):
        ops.space_to_depth2(g, g.input(np.ones((1, 1, 3, 4))))


even = st.integers(1, 4).map(lambda v: 2 * v)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), even, even),
                  elements=st.floats(-1e6, 1e6)))
def test_shuffle_round_trip(x):
    g = Graph()
    a = g.input(x)
    s = ops.space_to_depth2(g, a)
    n, c, h, w = x.shape
    assert g.value(s).shape == (n, 4 * c, h // 2, w // 2)
    back = ops.depth_to_space2(g, s)
    assert g.value(back).tobytes() == x.tobytes()


def test_upsample_and_backward():
    g = Graph()
    x = g.input(np.full((1, 1, 1, 1), 3.5))
    y = ops.upsample_nearest2(g, x)
    assert np.array_equal(g.value(y), np.full((1, 1, 2, 2), 3.5))
    grads = g.backward(ops.dot_const(g, y, np.arange(4.0).reshape(1, 1, 2, 2)))
    assert grads[x].item() == 6.0


def test_pools():
    g = Graph()
    x = g.input(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert g.value(ops.maxpool2(g, x)).item() == 4.0
    assert g.value(ops.avgpool2(g, x)).item() == 2.5


def test_maxpool_tie_goes_to_first():
    g = Graph()
    x = g.input(np.full((1, 1, 2, 2), 5.0))
    grads = g.backward(ops.mean_scalar(g, ops.maxpool2(g, x)))
    assert grads[x].ravel().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_relu_values():
    g = Graph()
    y = ops.relu(g, g.input(np.array([-1.0, 2.0]).reshape(1, 1, 1, 2)))
    assert g.value(y).ravel().tolist() == [0.0, 2.0]


def test_concat_order():
    g = Graph()
    a = np.zeros((1, 2, 4, 4))
    b = np.ones((1, 3, 4, 4))
    y = g.value(ops.concat_channels(g, [g.input(a), g.input(b)]))
    assert y.shape == (1, 5, 4, 4)
    assert not y[:, :2].any() and y[:, 2:].all()


def test_concat_mismatch():
    g = Graph()
    with pytest.raises(ShapeError):
        ops.concat_channels(g, [g.input(np.ones((1, 1, 4, 4))), g.input(np.ones((1, 1, 2, 2)))])


def test_add_mismatch():
    g = Graph()
    with pytest.raises(ShapeError):
        ops.add(g, g.input(np.ones((1, 1, 4, 4))), g.input(np.ones((1, 2, 4, 4))))


def test_bce_closed_forms():
    g = Graph()
    z = g.input(np.zeros((1, 1, 1, 1)))
    assert g.value(ops.bce_with_logits(g, z, np.zeros((1, 1, 1, 1)))).item() == pytest.approx(math.log(2), abs=1e-15)
    g = Graph()
    z = g.input(np.full((1, 1, 1, 1), 40.0))
    v = g.value(ops.bce_with_logits(g, z, np.ones((1, 1, 1, 1)))).item()
    assert 0 <= v < 1e-15
    g = Graph()
    z = g.input(np.full((1, 1, 1, 1), -800.0))
    assert np.isfinite(g.value(ops.bce_with_logits(g, z, np.ones((1, 1, 1, 1))))).all()


def test_bce_gradient_is_sigmoid_minus_target():
    z = np.random.default_rng(0).normal(size=(1, 1, 2, 2))
    t = np.array([0.0, 1.0, 1.0, 0.0]).reshape(1, 1, 2, 2)
    g = Graph()
    zi = g.input(z)
    grads = g.backward(ops.bce_with_logits(g, zi, t))
    assert np.allclose(grads[zi], (ops.sigmoid(z) - t) / 4, rtol=0, atol=1e-16)


def test_bce_rejects_soft_targets():
    g = Graph()
    with pytest.raises(ContractError):
        ops.bce_with_logits(g, g.input(np.zeros((1, 1, 1, 1))), np.full((1, 1, 1, 1), 0.5))


def test_bias_shape_checked():
    g = Graph()
    with pytest.raises(ShapeError):
        ops.bias_add(g, g.input(np.ones((1, 2, 2, 2))), Parameter("b", np.zeros((1, 3, 1, 1))))
