import numpy as np
import pytest

from bpfpn_lab import ops
from bpfpn_lab.errors import ContractError, GraphError, StateError
from bpfpn_lab.graph import PARAM_SLOT, Graph, Parameter


def test_record_inputs():
    g = Graph()
    a = g.input(np.ones((1, 1, 2, 2)))
    b = g.input(np.ones((1, 1, 2, 2)))
    c = ops.add(g, a, b)
    assert list(g.nodes[c].inputs) == [a, b]


def test_record_unknown_input():
    g = Graph()
    g.input(np.ones((1, 1, 1, 1)))
    with pytest.raises(GraphError):
        g.record("relu", (5,), np.ones((1, 1, 1, 1)))


def test_record_rejects_nonfinite():
    g = Graph()
    with pytest.raises(ContractError):
        g.input(np.full((1, 1, 1, 1), np.nan))


def test_stop_gradient_identity_forward():
    g = Graph()
    x = g.input(np.random.default_rng(0).random((1, 2, 3, 3)))
    s = g.stop_gradient(x)
    assert g.value(s).tobytes() == g.value(x).tobytes()


def test_stop_gradient_blocks():
    g = Graph()
    x = g.input(np.random.default_rng(0).random((1, 1, 2, 2)))
    loss = ops.dot_const(g, g.stop_gradient(x), np.ones((1, 1, 2, 2)))
    grads = g.backward(loss)
    assert not grads[x].any()


def test_stop_gradient_beside_open_path():
    g = Graph()
    x = g.input(np.random.default_rng(0).random((1, 1, 2, 2)))
    s = ops.add(g, x, g.stop_gradient(x))
    grads = g.backward(ops.dot_const(g, s, np.ones((1, 1, 2, 2))))
    assert np.array_equal(grads[x], np.ones((1, 1, 2, 2)))


def test_mean_backward():
    g = Graph()
    x = g.input(np.arange(4.0).reshape(1, 1, 2, 2))
    grads = g.backward(ops.mean_scalar(g, x))
    assert np.array_equal(grads[x], np.full((1, 1, 2, 2), 0.25))


def test_backward_twice_is_state_error():
    g = Graph()
    x = g.input(np.ones((1, 1, 1, 1)))
    loss = ops.mean_scalar(g, x)
    g.backward(loss)
    with pytest.raises(StateError):
        g.backward(loss)


def test_non_scalar_loss():
    g = Graph()
    x = g.input(np.ones((1, 1, 2, 2)))
    with pytest.raises(ContractError):
        g.backward(x)


def _shared_graph():
    rng = np.random.default_rng(1)
    w = ops.ConvWeights(Parameter("w", rng.normal(size=(2, 2, 3, 3))), Parameter("b", rng.normal(size=(1, 2, 1, 1))))
    g = Graph()
    x = g.input(rng.normal(size=(1, 2, 4, 4)))
    y1 = ops.relu(g, ops.conv2d(g, x, w))
    y2 = ops.conv2d(g, y1, w)
    loss = ops.dot_const(g, y2, rng.normal(size=(1, 2, 4, 4)))
    return g, w, x, y1, y2, loss


def test_use_sites_and_superposition():
    g, w, *_, loss = _shared_graph()
    assert len(w.weight.use_sites) == 2
    g.backward(loss)
    parts = g.per_use_grads(w.weight)
    assert len(parts) == 2
    assert np.array_equal(parts[0] + parts[1], w.weight.grad)


def test_single_use_per_use_grads():
    g = Graph()
    p = Parameter("p", np.ones((1, 1, 1, 1)))
    x = g.input(np.full((1, 1, 1, 1), 3.0))
    g.backward(ops.mean_scalar(g, ops.bias_add(g, x, p)))
    parts = g.per_use_grads(p)
    assert len(parts) == 1 and np.array_equal(parts[0], p.grad)


def test_unused_parameter():
    g = Graph()
    unused = Parameter("u", np.ones((1, 1, 1, 1)))
    x = g.input(np.ones((1, 1, 1, 1)))
    g.backward(ops.mean_scalar(g, x))
    assert g.per_use_grads(unused) == []
    assert not unused.grad.any()


def test_per_use_before_backward():
    g, w, *_ = _shared_graph()
    with pytest.raises(StateError):
        g.per_use_grads(w.weight)


def test_masked_empty_equals_full():
    g, w, x, *_, loss = _shared_graph()
    masked = g.backward_masked(loss, set())
    full = g.backward(loss)
    assert np.array_equal(masked[x], full[x])
    assert np.array_equal(masked.params["w"], full.params["w"])


def test_masked_second_use_gives_first_per_use_grad():
    g, w, x, y1, y2, loss = _shared_graph()
    second_conv = g.nodes[y2].inputs[0]  # y2 = bias_add(conv)
    masked = g.backward_masked(loss, {(second_conv, PARAM_SLOT)})
    g.backward(loss)
    assert np.array_equal(masked.params["w"], g.per_use_grads(w.weight)[0])


def test_masked_rejects_unknown_edge():
    g, *_, loss = _shared_graph()
    with pytest.raises(ContractError):
        g.backward_masked(loss, {(0, 3)})


def test_reaches_backward():
    g = Graph()
    a = g.input(np.ones((1, 1, 2, 2)))
    b = ops.relu(g, a)
    loss = ops.mean_scalar(g, b)
    assert g.reaches_backward(loss, a)
    s = g.stop_gradient(a)
    loss2 = ops.mean_scalar(g, s)
    assert not g.reaches_backward(loss2, a)
    assert not g.reaches_backward(loss, a, blocked_edges={(b, 0)})


def test_deterministic_accumulation_order():
    def run():
        g, w, x, *_, loss = _shared_graph()
        return g.backward(loss)[x].tobytes(), w.weight.grad.tobytes()

    assert run() == run()


def test_dump_format():
    g = Graph()
    a = g.input(np.ones((1, 1, 2, 2)))
    g.stop_gradient(a)
    lines = g.dump().splitlines()
    assert lines[0] == "node 0 input inputs=- barrier=0 param=-"
    assert lines[1] == "node 1 stop_gradient inputs=0 barrier=1 param=-"
