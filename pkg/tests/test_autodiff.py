import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from frozenadv.autodiff import OPS, Graph, NonScalarRootError, ShapeError, backward, forward_op, sign
from gradcases import CASES, check_op
from oracles import central_diff, max_rel_error


def test_add_example():
    g = Graph()
    out = forward_op(g, "add", [g.input([1, 2, 3]), g.input([4, 5, 6])])
    assert np.array_equal(g.value(out), [5, 7, 9])


def test_l2_norm_345():
    g = Graph()
    assert g.value(g.op("l2-norm", g.input([3.0, 4.0]))) == 5.0


def test_conv1d_padded_length():
    g = Graph()
    x = g.input(np.ones((1, 8, 1)))
    w = g.input(np.ones((3, 1, 1)))
    b = g.input(np.zeros(1))
    assert g.value(g.op("conv1d", x, w, b, stride=1, padding=1)).shape == (1, 8, 1)


def test_conv1d_matches_numpy_correlate():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=20), rng.normal(size=5)
    g = Graph()
    out = g.op("conv1d", g.input(x.reshape(1, 20, 1)), g.input(w.reshape(5, 1, 1)), g.input([0.0]))
    assert np.allclose(g.value(out).ravel(), np.correlate(x, w, mode="valid"))


def test_shape_error_names_op_and_shapes():
    g = Graph()
    with pytest.raises(ShapeError) as exc:
        g.op("matmul", g.input(np.ones((2, 3))), g.input(np.ones((4, 5))))
    msg = str(exc.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_unknown_op():
    g = Graph()
    with pytest.raises(ValueError, match="unsupported"):
        g.op("fft", g.input([1.0]))


def test_grad_of_l2_norm():
    g = Graph()
    x = g.input([3.0, 4.0])
    backward(g, g.op("l2-norm", x))
    assert np.allclose(g.grad(x), [0.6, 0.8])


def test_mse_self_has_zero_grad():
    g = Graph()
    x = g.input([1.0, -2.0, 0.5])
    g.backward(g.op("mse", x, x))
    assert np.array_equal(g.grad(x), np.zeros(3))


def test_non_scalar_root():
    g = Graph()
    x = g.input([1.0, 2.0])
    with pytest.raises(NonScalarRootError):
        g.backward(g.op("relu", x))


def test_backward_overwrites_and_skips_unreachable():
    g = Graph()
    x = g.input([1.0, 2.0])
    other = g.input([5.0])
    root = g.op("sum", g.op("mul", x, x))
    g.backward(root)
    g.backward(root)
    assert np.allclose(g.grad(x), [2.0, 4.0])
    assert g.grad(other) is None


def test_frozen_mode_params_get_no_grad():
    g = Graph(mode="frozen")
    w = g.param(np.ones((2, 2)))
    x = g.input(np.ones((1, 2)))
    g.backward(g.op("sum", g.op("matmul", x, w)))
    assert g.grad(w) is None and g.grad(x) is not None


def test_node_ids_topological():
    g = Graph()
    a = g.input([1.0])
    b = g.op("tanh", a)
    c = g.op("add", a, b)
    for n in g.nodes:
        assert all(p < n.id for p in n.parents)
    assert [a, b, c] == [0, 1, 2]


def test_sign_examples():
    assert np.array_equal(sign(np.array([0.3, -2.0, 0.0])), [1, -1, 0])
    assert np.array_equal(sign(np.zeros(4)), np.zeros(4))


def test_sign_at_stationary_point():
    g = Graph()
    z = g.input(np.ones(3))
    zt = g.const(np.ones(3))
    g.backward(g.op("l2-norm", g.op("sub", z, zt)))
    assert np.array_equal(sign(g.grad(z)), np.zeros(3))


def test_every_listed_op_has_a_case():
    assert set(CASES) == set(OPS)


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradient(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    for _ in range(5):
        assert check_op(name, rng) < 1e-4


def _mlp(g, x, weights):
    h = x
    acts = ["tanh", "gelu", "relu", "tanh"]
    for i, (w, b) in enumerate(weights):
        h = g.op("linear", h, g.param(w), g.param(b))
        if i < len(acts):
            h = g.op(acts[i], h)
    return g.op("l2-norm", h)


def test_five_layer_network_input_grad():
    rng = np.random.default_rng(3)
    dims = [6, 8, 8, 7, 5, 3]
    weights = [(rng.normal(size=(a, b)) / np.sqrt(a), rng.normal(size=b) * 0.1) for a, b in zip(dims, dims[1:])]
    for _ in range(20):
        x0 = rng.normal(size=(2, 6))
        g = Graph(mode="frozen")
        x = g.input(x0)
        g.backward(_mlp(g, x, weights))

        def f(v):
            gg = Graph(mode="frozen")
            return gg.value(_mlp(gg, gg.input(v), weights))
        assert max_rel_error(g.grad(x), central_diff(f, x0)) < 1e-4


def test_debug_mode_matches_plain():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(3, 4))
    grads = []
    for debug in (False, True):
        g = Graph(debug=debug)
        x = g.input(x0)
        a = g.op("tanh", x)
        b = g.op("mul", a, x)          # x has two consumers
        c = g.op("add", b, a)          # a has two consumers
        g.backward(g.op("sum", g.op("softmax", c)))
        grads.append(g.grad(x))
    assert np.array_equal(grads[0], grads[1])


def test_debug_mode_detects_early_read():
    g = Graph(debug=True)
    x = g.input([1.0, 2.0])
    y = g.op("tanh", x)
    root = g.op("sum", g.op("add", y, x))
    # corrupt topological order: make an earlier node consume a later one
    g.nodes[y].parents = (x, root)
    with pytest.raises(RuntimeError, match="pending"):
        g.backward(root)


def test_determinism_bitwise():
    rng = np.random.default_rng(9)
    x0 = rng.normal(size=(2, 10, 3))
    w0 = rng.normal(size=(3, 3, 4))
    out = []
    for _ in range(2):
        g = Graph()
        x, w = g.input(x0), g.input(w0)
        y = g.op("conv1d", x, w, g.const(np.zeros(4)), padding=1)
        g.backward(g.op("sum", g.op("gelu", y)))
        out.append((g.value(y).tobytes(), g.grad(x).tobytes(), g.grad(w).tobytes()))
    assert out[0] == out[1]


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_outputs_finite_and_l2_grad_unit(x):
    g = Graph()
    xi = g.input(x)
    n = g.op("l2-norm", xi)
    g.backward(n)
    assert np.all(np.isfinite(g.grad(xi)))
    if g.value(n) > 0:             # x/|x| is a unit vector however small x is
        assert np.isclose(np.linalg.norm(g.grad(xi)), 1.0)
    else:
        assert np.array_equal(g.grad(xi), np.zeros_like(x))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=st.floats(-30, 30)))
def test_softmax_rows_on_simplex(x):
    g = Graph()
    y = g.value(g.op("softmax", g.input(x)))
    assert np.all(y >= 0) and np.allclose(y.sum(-1), 1.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=st.floats(-30, 30)))
def test_layernorm_zero_mean(x):
    g = Graph()
    d = x.shape[-1]
    y = g.value(g.op("layernorm", g.input(x), g.input(np.ones(d)), g.input(np.zeros(d))))
    assert np.allclose(y.mean(-1), 0.0, atol=1e-9)
