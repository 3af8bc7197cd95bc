import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deformpic import tensor as T
from deformpic.tensor import NonFiniteError, Tensor

from grad_cases import cases
from oracles import gradcheck

CASES = cases()


@pytest.mark.parametrize("name,fn,inputs", CASES, ids=[c[0] for c in CASES])
def test_op_gradients_match_finite_differences(name, fn, inputs):
    assert gradcheck(fn, inputs) < 1e-3


def test_matmul_gradient_is_ones_times_b_transpose():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    with T.precision(np.float64):
        ta = Tensor(a, requires_grad=True)
        T.backward(T.sum_axis(T.matmul(ta, Tensor(b))))
    np.testing.assert_allclose(ta.grad, np.ones((4, 3)) @ b.T, rtol=1e-12)


def test_fan_out_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = x * x + x * 3.0
    T.backward(T.sum_axis(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 3)


def test_shared_subgraph_visited_once():
    x = Tensor(np.array(2.0), requires_grad=True)
    h = x * x
    T.backward(h * h)  # d/dx x^4 = 4x^3
    assert x.grad == pytest.approx(32.0)


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(x * 2.0)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.parents == ()


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_nonfinite_forward_names_op():
    x = Tensor(np.array([1e30, 1e30], dtype=np.float32))
    with pytest.raises(NonFiniteError, match="mul"):
        x * x


def test_nonfinite_input_is_rejected():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([0.0, 1.0])) + Tensor(np.array([np.nan, 0.0]))


def test_precision_context_restores_dtype():
    assert T.default_dtype() is np.float32
    with T.precision(np.float64):
        assert Tensor(np.ones(2)).data.dtype == np.float64
    assert Tensor(np.ones(2)).data.dtype == np.float32


def test_graph_signature_is_stable():
    def build():
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        return T.sum_axis(T.gelu(T.linear(x, Tensor(np.ones((3, 4)), requires_grad=True))))

    assert T.graph_signature(build()) == T.graph_signature(build())
    ops = [op for op, _ in T.graph_signature(build())]
    assert ops[-3:] == ["linear", "gelu", "sum"]


def test_take_with_repeated_indices_accumulates():
    x = Tensor(np.arange(3.0), requires_grad=True)
    T.backward(T.sum_axis(T.take(x, np.array([0, 0, 2]))))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_max_pool_routes_gradient_to_first_maximum():
    x = Tensor(np.array([[1.0, 3.0, 3.0, 0.0]]).T[None], requires_grad=True)  # (1, 4, 1)
    T.backward(T.sum_axis(T.max_pool_axis(x, axis=-2)))
    np.testing.assert_array_equal(x.grad[0, :, 0], [0, 1, 0, 0])


def test_drop_path_is_identity_at_eval_and_unbiased_in_training():
    x = Tensor(np.ones((20000, 1)))
    assert T.drop_path(x, 0.3, np.random.default_rng(0), training=False) is x
    y = T.drop_path(x, 0.3, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, np.float32(1 / 0.7)}
    assert y.mean() == pytest.approx(1.0, abs=0.02)


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 7)) * 10)
    np.testing.assert_allclose(T.softmax(x).data.sum(-1), 1.0, rtol=1e-6)


def test_layer_norm_statistics():
    x = Tensor(np.random.default_rng(0).normal(3.0, 2.0, size=(5, 16)))
    y = T.layer_norm(x).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-3)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-100, 100)),
       st.sampled_from([(1,), (4,), (1, 1), (3, 1, 1)]))
def test_unbroadcast_inverts_broadcast_shape(g, target):
    try:
        shape = np.broadcast_shapes(g.shape, target)
    except ValueError:
        return
    grad = np.broadcast_to(np.zeros(g.shape) + 1.0, shape)
    out = T.unbroadcast(np.ascontiguousarray(grad), target)
    assert out.shape == target
    assert out.sum() == pytest.approx(grad.sum())


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(-1e3, 1e3)))
def test_finite_inputs_give_finite_outputs(a):
    with T.precision(np.float64):
        x = Tensor(a)
        for out in (T.gelu(x), T.softmax(x), T.layer_norm(x), x * x, T.mean_axis(x)):
            assert np.all(np.isfinite(out.data))
