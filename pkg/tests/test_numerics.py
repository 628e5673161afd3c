import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moce import numerics as nx
from moce.numerics import Graph, Tensor, backward, fd_gradient


def grad_of(fn, *arrays_):
    """Backward-mode gradients of scalar fn(*tensors) w.r.t. every input."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays_]
    with Graph() as g:
        out = fn(*leaves)
        backward(g, out)
    return [leaf.grad for leaf in leaves]


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(b)))


def value_of(fn, *arrays_):
    with nx.no_grad():
        return float(fn(*[Tensor(np.asarray(a)) for a in arrays_]).data)


# -- forward examples

def test_softmax_symmetric_pair():
    np.testing.assert_array_equal(nx.softmax(np.array([0.0, 0.0])).data, [0.5, 0.5])


def test_matmul_identity():
    X = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(nx.matmul(np.eye(3), X).data, X)


def test_layer_norm_of_constant_is_zero():
    np.testing.assert_array_equal(nx.layer_norm(np.full((2, 6), 2.0)).data, np.zeros((2, 6)))
    # a mean that is not exactly representable leaves rounding residue only
    np.testing.assert_allclose(nx.layer_norm(np.full((2, 6), 3.7)).data, 0.0, atol=1e-12)


@pytest.mark.parametrize("name,call,shapes", [
    ("matmul", lambda a, b: nx.matmul(a, b), [(2, 3), (4, 2)]),
    ("add", lambda a, b: nx.add(a, b), [(2, 3), (3, 2)]),
    ("add_bias", lambda a, b: nx.add_bias(a, b), [(2, 3), (2,)]),
    ("mul_rows", lambda a, b: nx.mul_rows(a, b), [(2, 3), (3,)]),
])
def test_shape_errors_name_primitive_and_shapes(name, call, shapes):
    a, b = (np.zeros(s) for s in shapes)
    with pytest.raises(nx.ShapeError) as exc:
        call(a, b)
    msg = str(exc.value)
    assert name in msg
    assert str(shapes[0]) in msg and str(shapes[1]) in msg


def test_softmax_bad_axis():
    with pytest.raises(nx.ShapeError):
        nx.softmax(np.zeros((2, 2)), axis=3)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    s = nx.softmax(x, axis=1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


# -- backward examples

def test_grad_of_sum_is_ones():
    (g,) = grad_of(lambda x: nx.sum(x), np.random.default_rng(1).normal(size=(3, 4)))
    np.testing.assert_array_equal(g, np.ones((3, 4)))


def test_softmax_dot_onehot_matches_fd():
    onehot = np.array([0.0, 1.0, 0.0])
    f = lambda x: nx.sum(nx.mul(nx.softmax(x), onehot))  # noqa: E731
    x = np.array([1.0, 2.0, 3.0])
    (g,) = grad_of(f, x)
    fd = fd_gradient(lambda v: value_of(f, v), x, 1e-5)
    assert rel_err(g, fd) < 1e-6


def test_mse_weight_gradient_closed_form():
    rng = np.random.default_rng(2)
    W, x, t = rng.normal(size=(4, 3)), rng.normal(size=(3, 1)), rng.normal(size=(4, 1))
    (g,) = grad_of(lambda w: nx.mean(nx.square(nx.sub(nx.matmul(w, x), t))), W)
    expected = 2.0 / 4 * (W @ x - t) @ x.T
    np.testing.assert_allclose(g, expected, rtol=1e-12)


def test_backward_twice_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        loss = nx.sum(nx.square(x))
        backward(g, loss)
        with pytest.raises(nx.GraphError):
            backward(g, loss)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        y = nx.square(x)
        with pytest.raises(nx.GraphError):
            backward(g, y)


def test_tensor_from_other_graph_is_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph():
        y = nx.square(x)
    with Graph() as g2:
        with pytest.raises(nx.GraphError):
            nx.sum(y)
        loss = nx.sum(nx.square(x))
        with pytest.raises(nx.GraphError):
            backward(Graph(), loss)
        backward(g2, loss)


def test_gradients_accumulate_across_graphs_until_reset():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Graph() as g:
            backward(g, nx.sum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    nx.zero_grad([x])
    assert x.grad is None


def test_detach_blocks_gradient():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    w = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    with Graph() as g:
        backward(g, nx.sum(nx.mul(nx.detach(x), w)))
    assert x.grad is None
    np.testing.assert_array_equal(w.grad, [1.0, 2.0])


# -- fd oracle examples

def test_fd_quadratic():
    g = fd_gradient(lambda v: float(v[0] ** 2), np.array([3.0]), 1e-5)
    assert abs(g[0] - 6.0) < 1e-8


def test_fd_sum():
    x = np.random.default_rng(3).normal(size=(2, 5))
    np.testing.assert_allclose(fd_gradient(lambda v: float(v.sum()), x, 1e-5), 1.0, atol=1e-9)


def test_fd_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        fd_gradient(lambda v: 0.0, np.zeros(1), 0.0)


# -- every differentiable primitive vs the finite-difference oracle

_W = np.random.default_rng(99).uniform(-1, 1, size=(3, 3))


def _weighted(t):
    """Reduce any tensor to a scalar through fixed random weights."""
    w = np.random.default_rng(t.data.size).uniform(-1, 1, t.shape)
    return nx.sum(nx.mul(t, w))


PRIMITIVES = {
    "matmul": ([(3, 4), (4, 2)], lambda a, b: nx.matmul(a, b)),
    "matmul_batched": ([(2, 3, 4), (2, 4, 2)], lambda a, b: nx.matmul(a, b)),
    "add": ([(3, 4), (3, 4)], lambda a, b: nx.add(a, b)),
    "sub": ([(3, 4), (3, 4)], lambda a, b: nx.sub(a, b)),
    "mul": ([(3, 4), (3, 4)], lambda a, b: nx.mul(a, b)),
    "div": ([(3, 4), (3, 4)], lambda a, b: nx.div(a, nx.add(nx.square(b), np.ones((3, 4))))),
    "add_bias": ([(3, 4), (4,)], lambda a, b: nx.add_bias(a, b)),
    "mul_rows": ([(3, 4), (3,)], lambda a, b: nx.mul_rows(a, b)),
    "scale": ([(3, 4)], lambda a: nx.scale(a, -1.7)),
    "transpose": ([(2, 3, 4)], lambda a: nx.matmul(nx.transpose(a, (0, 2, 1)),
                                                   np.ones((2, 3, 2)))),
    "reshape": ([(3, 4)], lambda a: nx.matmul(nx.reshape(a, (4, 3)), _W)),
    "softmax": ([(3, 4)], lambda a: nx.softmax(a, axis=1)),
    "softmax_axis0": ([(3, 4)], lambda a: nx.softmax(a, axis=0)),
    "log_softmax": ([(3, 4)], lambda a: nx.log_softmax(a, axis=1)),
    "layer_norm": ([(3, 4)], lambda a: nx.layer_norm(a)),
    "layer_norm_affine": ([(3, 4), (4,), (4,)], lambda a, w, b: nx.layer_norm(a, w, b)),
    "gelu": ([(3, 4)], lambda a: nx.gelu(a)),
    "gather_rows": ([(4, 3)], lambda a: nx.gather_rows(a, [2, 0, 2, 3])),
    "scatter_rows": ([(3, 2)], lambda a: nx.scatter_rows(a, [4, 1, 4], 5)),
    "sum_axis": ([(3, 4)], lambda a: nx.sum(a, axis=1)),
    "mean": ([(3, 4)], lambda a: nx.mean(a, axis=0)),
    "var": ([(3, 4)], lambda a: nx.var(a, axis=1)),
    "l2_norm": ([(3, 4)], lambda a: nx.l2_norm(a, axis=1)),
    "square": ([(3, 4)], lambda a: nx.square(a)),
    "normal_cdf": ([(3, 4)], lambda a: nx.normal_cdf(a)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_fd(name):
    shapes, op = PRIMITIVES[name]
    f = lambda *xs: _weighted(op(*xs))  # noqa: E731
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(20):
        xs = [rng.uniform(-2, 2, s) for s in shapes]
        grads = grad_of(f, *xs)
        for i, g in enumerate(grads):
            def fi(v, i=i):
                args = list(xs)
                args[i] = v
                return value_of(f, *args)
            fd = fd_gradient(fi, xs[i], 1e-5)
            assert rel_err(g, fd) < 1e-4, (name, i)


def test_replay_is_bit_identical():
    def run(seed):
        rng_w = np.random.default_rng(5)
        w = Tensor(rng_w.normal(size=(4, 4)), requires_grad=True)
        with Graph(seed) as g:
            x = g.rng.normal(size=(3, 4))
            out = nx.sum(nx.gelu(nx.matmul(x, w)))
            backward(g, out)
        return out.data.copy(), w.grad.copy()

    a, b = run(11), run(11)
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1].tobytes() == b[1].tobytes()
