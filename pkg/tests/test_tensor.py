"""Autodiff core: every primitive's gradient against central differences."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import tokmoe.tensor as T
from tokmoe.errors import ConfigError, NumericError, ShapeError
from tokmoe.tensor import Tensor, backward


def numeric_grad(fn, arrays, which, eps=1e-6):
    """Central-difference gradient of scalar fn wrt arrays[which]."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[which], dtype=float)
    flat = base[which].reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = fn(*base)
        flat[i] = keep - eps
        lo = fn(*base)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def analytic_grad(fn, arrays, which):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = fn(*ts)
    backward(loss)
    return ts[which].grad


def check_op(fn_t, fn_np, arrays, tol=1e-7):
    for which in range(len(arrays)):
        got = analytic_grad(fn_t, arrays, which)
        want = numeric_grad(fn_np, arrays, which)
        scale = max(1.0, float(np.max(np.abs(want))))
        assert np.max(np.abs(got - want)) / scale < tol, (
            f"input {which}: max err {np.max(np.abs(got - want))}")


class TestArithmetic:
    def test_add_broadcast(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal(4)
        check_op(lambda x, y: ((x + y) * (x + y)).sum(),
                 lambda x, y: float(np.sum((x + y) ** 2)), [a, b])

    def test_sub_mul_div(self, rng):
        a = rng.standard_normal((2, 3)) + 3.0
        b = rng.standard_normal((2, 3)) + 3.0
        check_op(lambda x, y: (x * y - x / y).sum(),
                 lambda x, y: float(np.sum(x * y - x / y)), [a, b])

    def test_scalar_operands(self, rng):
        a = rng.standard_normal((2, 2))
        t = Tensor(a, requires_grad=True)
        loss = ((2.0 * t + 1.0) / 4.0 - 0.5).sum()
        backward(loss)
        assert np.allclose(t.grad, 0.5)

    def test_neg_sqrt(self, rng):
        a = np.abs(rng.standard_normal((3,))) + 0.5
        check_op(lambda x: (-T.sqrt(x)).sum(),
                 lambda x: float(-np.sum(np.sqrt(x))), [a])

    def test_broadcast_size1_axis(self, rng):
        a = rng.standard_normal((3, 1, 4))
        b = rng.standard_normal((1, 5, 4))
        check_op(lambda x, y: (x * y).sum(),
                 lambda x, y: float(np.sum(x * y)), [a, b])

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((2, 4)))


class TestMatmul:
    def test_2d(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        check_op(lambda x, y: T.matmul(x, y).sum(),
                 lambda x, y: float(np.sum(x @ y)), [a, b])

    def test_batched(self, rng):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 4, 5))
        check_op(lambda x, y: T.matmul(x, y).sum(),
                 lambda x, y: float(np.sum(x @ y)), [a, b])

    def test_broadcast_batch(self, rng):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 5))
        check_op(lambda x, y: T.matmul(x, y).sum(),
                 lambda x, y: float(np.sum(x @ y)), [a, b])

    def test_vector_promotion(self, rng):
        a = rng.standard_normal(4)
        b = rng.standard_normal((4, 3))
        check_op(lambda x, y: T.matmul(x, y).sum(),
                 lambda x, y: float(np.sum(x @ y)), [a, b])

    def test_inner_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestAffine:
    def test_matches_manual(self, rng):
        x = rng.standard_normal((5, 3))
        w = rng.standard_normal((4, 3))
        b = rng.standard_normal(4)
        out = T.affine(Tensor(x), Tensor(w), Tensor(b))
        assert np.allclose(out.data, x @ w.T + b)

    def test_grads(self, rng):
        x = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((5, 4))
        b = rng.standard_normal(5)
        check_op(lambda a, c, d: (T.affine(a, c, d) * T.affine(a, c, d)).sum(),
                 lambda a, c, d: float(np.sum((a @ c.T + d) ** 2)),
                 [x, w, b], tol=1e-6)


class TestReductionsShapes:
    def test_sum_axis_keepdims(self, rng):
        a = rng.standard_normal((3, 4, 2))
        check_op(lambda x: (T.sum_(x, axis=1, keepdims=True) * 3.0).sum(),
                 lambda x: float(np.sum(np.sum(x, axis=1, keepdims=True) * 3.0)), [a])

    def test_mean_axis(self, rng):
        a = rng.standard_normal((4, 6))
        check_op(lambda x: (T.mean(x, axis=0) * T.mean(x, axis=0)).sum(),
                 lambda x: float(np.sum(np.mean(x, axis=0) ** 2)), [a])

    def test_reshape_transpose(self, rng):
        a = rng.standard_normal((2, 3, 4))
        check_op(
            lambda x: (T.transpose(T.reshape(x, (6, 4)), (1, 0)) *
                       T.transpose(T.reshape(x, (6, 4)), (1, 0))).sum(),
            lambda x: float(np.sum(x ** 2)), [a])

    def test_concat(self, rng):
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((2, 5))

        def t_fn(x, y):
            c = T.concat([x, y], axis=1)
            return (c * c).sum()

        check_op(t_fn,
                 lambda x, y: float(np.sum(np.concatenate([x, y], axis=1) ** 2)),
                 [a, b])

    def test_slice(self, rng):
        a = rng.standard_normal((4, 6))
        key = (slice(None), slice(1, 4))
        check_op(lambda x: (T.slice_(x, key) * T.slice_(x, key)).sum(),
                 lambda x: float(np.sum(x[:, 1:4] ** 2)), [a])

    def test_gather(self, rng):
        a = rng.standard_normal((5, 3))
        idx = np.array([2, 0, 1, 2, 0])[:, None]
        check_op(lambda x: (T.gather(x, idx, axis=1) *
                            T.gather(x, idx, axis=1)).sum(),
                 lambda x: float(np.sum(np.take_along_axis(
                     x, idx, axis=1) ** 2)), [a])


class TestActivations:
    def test_relu(self, rng):
        a = rng.standard_normal((4, 4)) + 0.05
        check_op(lambda x: (T.relu(x) * T.relu(x)).sum(),
                 lambda x: float(np.sum(np.maximum(x, 0.0) ** 2)), [a])

    def test_gelu_value(self):
        from scipy.special import erf
        x = np.linspace(-3, 3, 13)
        out = T.gelu(Tensor(x))
        want = x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        assert np.allclose(out.data, want, atol=1e-12)

    def test_gelu_grad(self, rng):
        from scipy.special import erf
        a = rng.standard_normal((3, 5))
        check_op(lambda x: (T.gelu(x) * T.gelu(x)).sum(),
                 lambda x: float(np.sum(
                     (x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))) ** 2)),
                 [a], tol=1e-6)

    def test_gelu_fixed_points(self):
        out = T.gelu(Tensor(np.array([0.0])))
        assert out.data[0] == 0.0


class TestSoftmax:
    def test_rows_sum_to_one(self, rng):
        x = rng.standard_normal((6, 9)) * 5
        out = T.softmax_temp(Tensor(x), tau=0.7, axis=-1)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((3, 4))
        a = T.softmax_temp(Tensor(x), tau=1.3, axis=-1).data
        b = T.softmax_temp(Tensor(x + 100.0), tau=1.3, axis=-1).data
        assert np.allclose(a, b, atol=1e-12)

    def test_extreme_logits_stable(self):
        x = np.array([[1000.0, 0.0, -1000.0]])
        out = T.softmax_temp(Tensor(x), tau=1.0, axis=-1)
        assert np.all(np.isfinite(out.data))
        assert abs(out.data.sum() - 1.0) < 1e-12

    def test_temperature_flattens(self, rng):
        x = rng.standard_normal(5)
        sharp = T.softmax_temp(Tensor(x), tau=0.1, axis=-1).data
        flat = T.softmax_temp(Tensor(x), tau=10.0, axis=-1).data
        assert sharp.max() > flat.max()

    def test_grad(self, rng):
        x = rng.standard_normal((2, 5))
        w = rng.standard_normal((2, 5))

        def np_fn(a):
            z = a / 0.8
            z = z - z.max(axis=-1, keepdims=True)
            e = np.exp(z)
            s = e / e.sum(axis=-1, keepdims=True)
            return float(np.sum(s * w))

        check_op(lambda a: (T.softmax_temp(a, tau=0.8, axis=-1) *
                            Tensor(w)).sum(), np_fn, [x])

    def test_bad_tau_raises(self):
        with pytest.raises(ConfigError):
            T.softmax_temp(Tensor(np.zeros(3)), tau=0.0, axis=-1)

    def test_nonfinite_input_raises(self):
        with pytest.raises(NumericError):
            T.softmax_temp(Tensor(np.array([1.0, np.nan])), tau=1.0, axis=-1)

    @given(st.integers(min_value=1, max_value=6),
           st.floats(min_value=0.05, max_value=20.0))
    @settings(max_examples=30, deadline=None)
    def test_simplex_property(self, n, tau):
        x = np.linspace(-2, 2, n).reshape(1, n)
        out = T.softmax_temp(Tensor(x), tau=tau, axis=-1).data
        assert np.all(out > 0)
        assert abs(out.sum() - 1.0) < 1e-12


class TestLogSoftmaxLayerNorm:
    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = rng.standard_normal((4, 7))
        a = T.log_softmax(Tensor(x), axis=-1).data
        b = np.log(T.softmax_temp(Tensor(x), tau=1.0, axis=-1).data)
        assert np.allclose(a, b, atol=1e-12)

    def test_log_softmax_grad(self, rng):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 4))

        def np_fn(a):
            z = a - a.max(axis=-1, keepdims=True)
            ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            return float(np.sum(ls * w))

        check_op(lambda a: (T.log_softmax(a, axis=-1) * Tensor(w)).sum(),
                 np_fn, [x])

    def test_layer_norm_stats(self, rng):
        x = rng.standard_normal((5, 8)) * 3 + 2
        g = Tensor(np.ones(8))
        b = Tensor(np.zeros(8))
        out = T.layer_norm(Tensor(x), g, b).data
        assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        assert np.allclose(out.std(axis=-1), 1.0, atol=1e-3)

    def test_layer_norm_grad(self, rng):
        x = rng.standard_normal((2, 6))
        gain = rng.standard_normal(6)
        bias = rng.standard_normal(6)
        w = rng.standard_normal((2, 6))

        def np_fn(a, g, b):
            mu = a.mean(axis=-1, keepdims=True)
            var = a.var(axis=-1, keepdims=True)
            xhat = (a - mu) / np.sqrt(var + 1e-5)
            return float(np.sum((xhat * g + b) * w))

        check_op(lambda a, g, b: (T.layer_norm(a, g, b) * Tensor(w)).sum(),
                 np_fn, [x, gain, bias], tol=1e-6)


class TestEmbeddingBackward:
    def test_repeated_rows_accumulate(self, rng):
        table = rng.standard_normal((4, 3))
        idx = np.array([1, 1, 3, 1])
        t = Tensor(table.copy(), requires_grad=True)
        out = T.embedding(t, idx)
        backward(out.sum())
        want = np.zeros_like(table)
        np.add.at(want, idx, np.ones((4, 3)))
        assert np.array_equal(t.grad, want)


class TestTapeSemantics:
    def test_grad_accumulates_across_backward_calls(self, rng):
        t = Tensor(rng.standard_normal(3), requires_grad=True)
        backward((t * 2.0).sum())
        backward((t * 3.0).sum())
        assert np.allclose(t.grad, 5.0)

    def test_zero_grad(self, rng):
        t = Tensor(rng.standard_normal(3), requires_grad=True)
        backward(t.sum())
        t.zero_grad()
        assert t.grad is None

    def test_shared_subexpression(self, rng):
        t = Tensor(rng.standard_normal(4), requires_grad=True)
        shared = t * 2.0
        loss = (shared + shared).sum()
        backward(loss)
        assert np.allclose(t.grad, 4.0)

    def test_diamond_graph(self, rng):
        a = rng.standard_normal((3,))
        check_op(lambda x: ((x * x) + (x * 3.0)).sum(),
                 lambda x: float(np.sum(x * x + 3 * x)), [a])

    def test_backward_requires_scalar(self, rng):
        t = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        with pytest.raises(ConfigError):
            backward(t * 2.0)

    def test_no_grad_for_constant_inputs(self, rng):
        c = Tensor(rng.standard_normal(3))
        t = Tensor(rng.standard_normal(3), requires_grad=True)
        backward((c * t).sum())
        assert c.grad is None
        assert t.grad is not None

    def test_deep_chain_no_recursion_limit(self):
        t = Tensor(np.array([1.0]), requires_grad=True)
        x = t
        for _ in range(5000):
            x = x + 1.0
        backward(x.sum())
        assert t.grad[0] == 1.0

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nonfinite_forward_raises(self):
        a = Tensor(np.array([1e308]))
        b = Tensor(np.array([1e308]))
        with pytest.raises(NumericError):
            a + b


class TestUnbroadcast:
    @given(st.integers(min_value=1, max_value=4),
           st.integers(min_value=1, max_value=4))
    @settings(max_examples=25, deadline=None)
    def test_gradient_shape_matches_input(self, n, m):
        a = np.ones((n, 1))
        b = np.ones((1, m))
        ta = Tensor(a, requires_grad=True)
        tb = Tensor(b, requires_grad=True)
        backward((ta * tb).sum())
        assert ta.grad.shape == a.shape
        assert tb.grad.shape == b.shape
        assert np.allclose(ta.grad, m)
        assert np.allclose(tb.grad, n)
