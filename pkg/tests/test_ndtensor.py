"""Gradient and graph tests for the reverse-mode engine.

Every primitive is checked against central finite differences in float64;
structural properties (broadcasting, graph reuse, the multiply counter) get
direct and property-based tests.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import poredit.ndtensor as nd

RNG = np.random.default_rng(42)
FD_EPS = 1e-6
W34 = RNG.normal(size=(3, 4))
W43 = RNG.normal(size=(4, 3))
W35 = RNG.normal(size=(3, 5))
W2x35 = RNG.normal(size=(2, 3, 5))


def numeric_grad(fn, x: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_grad(build, x: np.ndarray, atol=1e-7, rtol=1e-5):
    """build(tensor) -> scalar DiffTensor; compares backward vs FD."""
    t = nd.parameter(x.copy())
    loss = build(t)
    nd.backward(loss)

    def scalar(arr):
        with nd.no_grad():
            return build(nd.as_tensor(arr)).item()

    ref = numeric_grad(scalar, x.copy())
    np.testing.assert_allclose(t.grad, ref, atol=atol, rtol=rtol)


@pytest.mark.parametrize(
    "name,build",
    [
        ("add", lambda t: nd.tsum(t + 2.0 * t)),
        ("mul", lambda t: nd.tsum(t * t)),
        ("div", lambda t: nd.tsum(t / (t * t + 2.0))),
        ("reshape", lambda t: nd.tsum(nd.reshape(t, (-1,)) * np.arange(t.size))),
        ("permute", lambda t: nd.tsum(nd.permute(t, (1, 0)) * W43)),
        ("roll", lambda t: nd.tsum(nd.roll(t, (1, -1), (0, 1)) * W34)),
        ("gelu", lambda t: nd.tsum(nd.gelu(t))),
        ("sigmoid", lambda t: nd.tsum(nd.sigmoid(t) * W34)),
        ("tanh", lambda t: nd.tsum(nd.tanh(t) * W34)),
        ("silu", lambda t: nd.tsum(nd.silu(t))),
        ("log", lambda t: nd.tsum(nd.log(t * t + 1.5))),
        ("softmax", lambda t: nd.tsum(nd.softmax(t) * W34)),
        ("layer_norm", lambda t: nd.tsum(nd.layer_norm(t) * W34)),
        ("mean", lambda t: nd.tmean(t * t)),
    ],
)
def test_primitive_gradients(name, build):
    check_grad(build, RNG.normal(size=(3, 4)))


def test_matmul_gradient():
    b = RNG.normal(size=(4, 5))
    check_grad(lambda t: nd.tsum(nd.matmul(t, b) * W35), RNG.normal(size=(3, 4)))


def test_batched_matmul_gradient():
    b = RNG.normal(size=(2, 4, 5))
    w = RNG.normal(size=(2, 3, 5))
    check_grad(lambda t: nd.tsum(nd.matmul(t, b) * w), RNG.normal(size=(2, 3, 4)))


def test_concat_split_gradients():
    w = RNG.normal(size=(6, 2))

    def build(t):
        parts = nd.split(t, [2, 1, 3], axis=0)
        return nd.tsum(nd.concat(parts[::-1], axis=0) * w)

    check_grad(build, RNG.normal(size=(6, 2)))


def test_gather_rows_gradient():
    idx = np.array([0, 2, 2, 1])
    w = RNG.normal(size=(4, 3))
    check_grad(lambda t: nd.tsum(nd.gather_rows(t, idx) * w), RNG.normal(size=(3, 3)))


def test_clamp_gradient_passes_inside_blocks_outside():
    x = np.array([-2.0, -0.5, 0.5, 2.0])
    t = nd.parameter(x)
    nd.backward(nd.tsum(nd.clamp(t, -1.0, 1.0)))
    np.testing.assert_array_equal(t.grad, [0.0, 1.0, 1.0, 0.0])


def test_broadcast_gradient_accumulates():
    bias = RNG.normal(size=(4,))
    check_grad(lambda t: nd.tsum((t + bias) * W34), RNG.normal(size=(3, 4)))
    # and the broadcast side
    full = nd.as_tensor(RNG.normal(size=(3, 4)))
    check_grad(lambda t: nd.tsum(full * (t + 0.0)), RNG.normal(size=(4,)))


def test_shared_subgraph_counted_once():
    t = nd.parameter(np.array([3.0]))
    y = t * t
    loss = nd.tsum(y + y)
    nd.backward(loss)
    np.testing.assert_allclose(t.grad, [12.0])


def test_no_grad_builds_no_graph():
    t = nd.parameter(np.ones(3))
    with nd.no_grad():
        out = nd.tsum(t * t)
    assert out._parents == ()
    assert not out.requires_grad


def test_backward_requires_scalar():
    t = nd.parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        nd.backward(t * 2.0)


def test_matmul_shape_error():
    with pytest.raises(nd.ShapeError):
        nd.matmul(nd.as_tensor(np.ones((2, 3))), nd.as_tensor(np.ones((4, 2))))


def test_multiply_counter_exact():
    nd.reset_multiply_count()
    a = nd.as_tensor(np.ones((3, 4)))
    b = nd.as_tensor(np.ones((4, 5)))
    nd.matmul(a, b)
    assert nd.multiply_count() == 3 * 4 * 5
    nd.reset_multiply_count()
    a = nd.as_tensor(np.ones((2, 7, 3, 4)))
    b = nd.as_tensor(np.ones((2, 7, 4, 5)))
    nd.matmul(a, b)
    assert nd.multiply_count() == 2 * 7 * 3 * 4 * 5


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one(n, m, seed):
    x = np.random.default_rng(seed).normal(scale=5, size=(n, m))
    out = nd.softmax(nd.as_tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(n), atol=1e-12)
    assert (out >= 0).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_layer_norm_standardizes_last_axis(m, seed):
    x = np.random.default_rng(seed).normal(scale=3, size=(4, m))
    out = nd.layer_norm(nd.as_tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
    assert (out.var(axis=-1) <= 1.0 + 1e-8).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_silu_is_x_times_sigmoid(seed):
    x = np.random.default_rng(seed).normal(scale=4, size=17)
    np.testing.assert_allclose(
        nd.silu(nd.as_tensor(x)).data, x * nd.sigmoid(nd.as_tensor(x)).data, rtol=1e-12
    )
