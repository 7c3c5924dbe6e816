import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import erf

from perceiver import tensor as T
from perceiver.errors import DimensionError, NonFiniteError, StateError
from perceiver.gradcheck import check_gradients

from conftest import param


def grad_of(fn, *tensors):
    with T.Tape() as tape:
        out = fn(*tensors)
    T.backward(out, tape)
    return [t.grad for t in tensors]


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.5, -2.0], [3.0, 4.25]])
        out = T.matmul(T.Tensor(np.eye(2)), T.Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_hand_product(self):
        out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_scalar_case(self):
        assert T.matmul(T.Tensor([[2.0]]), T.Tensor([[3.0]])).data[0, 0] == 6.0

    def test_inner_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))

    def test_adjoints(self, rng):
        a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
        ga, gb = grad_of(lambda a, b: T.sum_all(T.matmul(a, b)), a, b)
        ones = np.ones((3, 2))
        np.testing.assert_allclose(ga, ones @ b.data.T)
        np.testing.assert_allclose(gb, a.data.T @ ones)

    @given(st.lists(st.integers(-9, 9), min_size=8, max_size=8))
    def test_associativity_exact_on_integers(self, vals):
        a = T.Tensor(np.array(vals[:4], dtype=np.float64).reshape(2, 2))
        b = T.Tensor(np.array(vals[4:], dtype=np.float64).reshape(2, 2))
        c = T.Tensor(np.array(vals[::-1], dtype=np.float64).reshape(2, 4))
        left = T.matmul(T.matmul(a, b), c).data
        right = T.matmul(a, T.matmul(b, c)).data
        np.testing.assert_array_equal(left, right)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax_last_axis(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_equal_inputs(self):
        np.testing.assert_allclose(T.softmax_last_axis(T.Tensor([1000.0, 1000.0])).data, [0.5, 0.5])

    def test_closed_form(self):
        out = T.softmax_last_axis(T.Tensor(np.array([0.0, math.log(3.0)])))
        np.testing.assert_allclose(out.data, [0.25, 0.75], rtol=1e-12)

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            T.softmax_last_axis(T.Tensor(np.zeros((3, 0))))

    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        p = T.softmax_last_axis(T.Tensor(x)).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        shifted = T.softmax_last_axis(T.Tensor(x + c)).data
        np.testing.assert_allclose(shifted, p, atol=1e-12)


class TestLayerNorm:
    def _ln(self, x, c=None, eps=T.DEFAULT_EPS, gain=None, bias=None):
        c = c or np.shape(x)[-1]
        g = T.Tensor(np.ones(c) if gain is None else gain)
        b = T.Tensor(np.zeros(c) if bias is None else bias)
        return T.layer_norm(T.Tensor(np.asarray(x, dtype=np.float64)), g, b, eps).data

    def test_constant_row_maps_to_bias(self):
        np.testing.assert_array_equal(self._ln([5.0, 5.0, 5.0, 5.0]), np.zeros(4))

    def test_already_normalized(self):
        np.testing.assert_allclose(self._ln([1.0, -1.0], eps=1e-14), [1.0, -1.0], rtol=1e-10)

    def test_zero_gain_gives_bias(self, rng):
        bias = np.array([0.5, -1.0, 2.0])
        out = self._ln(rng.normal(size=(4, 3)), gain=np.zeros(3), bias=bias)
        np.testing.assert_array_equal(out, np.broadcast_to(bias, (4, 3)))

    @given(arrays(np.float64, (4, 6), elements=st.floats(-100, 100)))
    def test_moments(self, x):
        spread = x.std(axis=-1)
        out = self._ln(x)
        for row, s in zip(out, spread):
            if s < 1.0:
                continue
            assert abs(row.mean()) < 1e-10
            # eps shrinks the variance by var / (var + eps)
            assert abs(row.var() - 1.0) < 1e-5 / s**2 + 1e-8


class TestGelu:
    def test_values(self):
        out = T.gelu(T.Tensor(np.array([0.0, 1.0, 30.0, -30.0]))).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(0.5 * (1 + erf(1 / math.sqrt(2))), abs=1e-15)
        assert out[1] == pytest.approx(0.8413, abs=1e-4)
        assert out[2] == pytest.approx(30.0)
        assert abs(out[3]) < 1e-12


class TestLinear:
    def test_identity(self, rng):
        x = rng.normal(size=(5, 3))
        out = T.linear(T.Tensor(x), T.Tensor(np.eye(3)), T.Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, x)

    def test_hand(self):
        out = T.linear(T.Tensor([1.0, 1.0]), T.Tensor([[1.0], [1.0]]), T.Tensor([1.0]))
        np.testing.assert_array_equal(out.data, [3.0])

    def test_batch_shape(self, rng):
        out = T.linear(T.Tensor(rng.normal(size=(7, 4))), T.Tensor(rng.normal(size=(4, 2))), T.Tensor(np.zeros(2)))
        assert out.shape == (7, 2)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            T.linear(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))), T.Tensor(np.zeros(2)))


class TestMeanOverIndex:
    def test_cases(self):
        np.testing.assert_array_equal(T.mean_over_index(T.Tensor([[1.0, 2.0]])).data, [1.0, 2.0])
        np.testing.assert_array_equal(T.mean_over_index(T.Tensor([[0.0], [2.0]])).data, [1.0])
        v = np.array([0.25, -3.0, 7.5])
        np.testing.assert_allclose(T.mean_over_index(T.Tensor(np.tile(v, (512, 1)))).data, v)

    def test_empty(self):
        with pytest.raises(DimensionError):
            T.mean_over_index(T.Tensor(np.zeros((0, 3))))

    def test_adjoint_splits_evenly(self):
        x = param(np.zeros((4, 2)))
        (g,) = grad_of(lambda x: T.sum_all(T.mean_over_index(x)), x)
        np.testing.assert_allclose(g, np.full((4, 2), 0.25))


class TestBackward:
    def test_linear_case(self, rng):
        x = rng.normal(size=5)
        w = param(np.zeros(5))
        (g,) = grad_of(lambda w: T.sum_all(T.mul(w, T.Tensor(x))), w)
        np.testing.assert_allclose(g, x)

    def test_square(self):
        x = param([3.0])
        (g,) = grad_of(lambda x: T.sum_all(T.mul(x, x)), x)
        np.testing.assert_allclose(g, [6.0])

    def test_non_scalar_loss(self):
        x = param([1.0, 2.0])
        with T.Tape() as tape:
            y = T.scale(x, 2.0)
        with pytest.raises(DimensionError):
            T.backward(y, tape)

    def test_reused_tape(self):
        x = param([1.0])
        with T.Tape() as tape:
            y = T.sum_all(T.mul(x, x))
        T.backward(y, tape)
        with pytest.raises(StateError):
            T.backward(y, tape)

    def test_leaf_used_twice_accumulates(self):
        x = param([2.0])
        (g,) = grad_of(lambda x: T.sum_all(T.add(T.mul(x, x), x)), x)
        np.testing.assert_allclose(g, [5.0])


class TestGuards:
    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_surfaces(self):
        with pytest.raises(NonFiniteError):
            T.scale(T.Tensor(np.array([1e308])), 10.0)

    def test_add_broadcasts_only_leading(self):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(3)))
        with pytest.raises(DimensionError):
            T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 1))))

    def test_dtype_selection(self):
        T.set_default_dtype(np.float64)
        assert T.Tensor([1, 2]).dtype == np.float64
        T.set_default_dtype(np.float32)
        assert T.Tensor([1, 2]).dtype == np.float32
        assert T.Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64

    def test_grad_shape_matches(self, rng):
        w = param(rng.normal(size=(3, 2)))
        (g,) = grad_of(lambda w: T.sum_all(T.matmul(T.Tensor(np.ones((4, 3))), w)), w)
        assert g.shape == w.shape


PRIMITIVES = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: T.scale(a, -1.7), [(2, 5)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
    "linear": (lambda x, w, b: T.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
    "softmax": (lambda a: T.softmax_last_axis(a), [(3, 6)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [(3, 5), (5,), (5,)]),
    "gelu": (lambda a: T.gelu(a), [(4, 3)]),
    "mean_over_index": (lambda a: T.mean_over_index(a), [(2, 5, 3)]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    "transpose": (lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=-1), [(3, 2), (3, 4)]),
    "broadcast_leading": (lambda a: T.broadcast_leading(a, (3,)), [(2, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name, rng):
    fn, shapes = PRIMITIVES[name]
    inputs = [param(rng.normal(size=s)) for s in shapes]
    weights = T.Tensor(rng.normal(size=fn(*inputs).shape))
    result = check_gradients(lambda: T.sum_all(T.mul(fn(*inputs), weights)), inputs, h=1e-5)
    assert result.max_rel_error < 1e-5, result.worst


def test_loss_gradients_match_finite_differences(rng):
    logits = param(rng.normal(size=(4, 5)))
    targets = np.array([0, 4, 2, 2])
    assert check_gradients(lambda: T.cross_entropy(logits, targets), [logits]).max_rel_error < 1e-5
    multi = (rng.random((4, 5)) < 0.5).astype(float)
    assert check_gradients(lambda: T.sigmoid_cross_entropy(logits, multi), [logits]).max_rel_error < 1e-5


def test_flop_counter_tallies_by_kind():
    with T.FlopCounter() as fc:
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 4))))
        T.softmax_last_axis(T.Tensor(np.ones((2, 4))))
        T.reshape(T.Tensor(np.ones(6)), (2, 3))
    assert fc.by_kind["matmul"] == 2 * 2 * 3 * 4
    assert fc.by_kind["softmax"] == T.FLOPS_PER_ELEMENT["softmax"] * 8
    assert fc.total == 48 + T.FLOPS_PER_ELEMENT["softmax"] * 8


def test_deterministic_reductions_are_order_free(rng):
    x = rng.normal(size=(1, 4096)).astype(np.float32)
    w = rng.normal(size=(4096, 1)).astype(np.float32)
    perm = rng.permutation(4096)
    with T.deterministic():
        a = T.matmul(T.Tensor(x), T.Tensor(w)).data
        b = T.matmul(T.Tensor(x[:, perm]), T.Tensor(w[perm])).data
    assert a.dtype == np.float32
    np.testing.assert_array_equal(a, b)
