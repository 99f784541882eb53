import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossdecode.numerics import (ConstantInputError, OptimState, Tape, Tensor, adamw_step, clip_grad_norm,
                                  derangement, grad_check, make_rng, onecycle_lr, pearson, peak_step,
                                  rowwise_pearson)
from crossdecode.numerics import tape as T

finite = st.floats(-3, 3, allow_nan=False, width=64)


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestTape:
    def test_matmul_grad_matches_closed_form(self):
        rng = np.random.default_rng(0)
        A, B = _param(rng, 3, 4), _param(rng, 4, 2)
        with Tape() as tape:
            loss = T.tsum(A @ B)
        tape.backward(loss)
        np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ B.data.T)
        np.testing.assert_allclose(B.grad, A.data.T @ np.ones((3, 2)))

    def test_broadcast_add_reduces_grad(self):
        rng = np.random.default_rng(1)
        x, b = _param(rng, 5, 3), _param(rng, 3)
        with Tape() as tape:
            loss = T.tsum(T.square(x + b))
        tape.backward(loss)
        np.testing.assert_allclose(b.grad, (2 * (x.data + b.data)).sum(0))

    def test_reused_node_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(x * x + x)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [5.0])

    def test_no_recording_outside_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.tsum(x * 2.0)
        assert y.data == 6.0
        with Tape() as tape:
            pass
        assert len(tape) == 0

    def test_float32_stays_float32_with_python_scalars(self):
        x = Tensor(np.ones(3, dtype=np.float32))
        for y in (x * 0.5, 0.5 * x, x + 1.0, x / 3.0, 1.0 - x, T.gelu(x)):
            assert y.data.dtype == np.float32

    @pytest.mark.parametrize("op", ["tanh", "gelu", "exp", "relu_shifted", "layer_norm", "log_softmax",
                                    "l2_normalize", "take_concat", "swapaxes", "mean", "sqrt", "div", "tabs"])
    def test_op_gradients(self, op):
        rng = np.random.default_rng(3)
        x = _param(rng, 4, 5)
        w = Tensor(rng.normal(size=(4, 5)))
        g, b = _param(rng, 5), _param(rng, 5)

        def f():
            if op == "tanh":
                y = T.tanh(x)
            elif op == "gelu":
                y = T.gelu(x)
            elif op == "exp":
                y = T.exp(x * 0.3)
            elif op == "relu_shifted":
                y = T.relu(x + 5.0)
            elif op == "layer_norm":
                y = T.layer_norm(x, g, b)
            elif op == "log_softmax":
                y = T.log_softmax(x, axis=-1)
            elif op == "l2_normalize":
                y = T.l2_normalize(x)
            elif op == "take_concat":
                y = T.concat([T.take(x, np.array([2, 0, 2]), axis=0), T.take(x, np.array([1]), axis=0)], axis=0)
            elif op == "swapaxes":
                y = T.swapaxes(T.reshape(x, (2, 2, 5)), 0, 2)
                return T.tsum(T.square(y) * Tensor(np.arange(20.0).reshape(5, 2, 2)))
            elif op == "mean":
                y = T.mean(x, axis=0, keepdims=True) * x
            elif op == "sqrt":
                y = T.sqrt(T.square(x) + 1.0)
            elif op == "div":
                y = x / (T.square(x) + 1.0)
            elif op == "tabs":
                y = T.tabs(x + 0.05)
            return T.tsum(y * w)

        params = [x, g, b] if op == "layer_norm" else [x]
        report = grad_check(f, params)
        assert report.worst < 1e-6, str(report)

    def test_grad_check_rejects_float32(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(TypeError):
            grad_check(lambda: T.tsum(x), [x])

    def test_grad_check_flags_wrong_gradient(self):
        rng = np.random.default_rng(4)
        x = _param(rng, 3)

        def wrong():
            # forward x^2 with a deliberately wrong backward (2x replaced by x)
            out = T._node(x.data**2, (x,), lambda gr: [gr * x.data])
            return T.tsum(out)

        assert grad_check(wrong, [x]).worst > 0.1

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=finite))
    def test_log_softmax_rows_normalize(self, x):
        y = T.log_softmax(Tensor(x)).data
        np.testing.assert_allclose(np.exp(y).sum(-1), 1.0, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=finite), st.floats(0.1, 10))
    def test_l2_normalize_scale_invariant(self, x, s):
        x = x + np.array([5.0, 0, 0, 0])   # keep rows away from zero
        np.testing.assert_allclose(T.l2_normalize(Tensor(x)).data, T.l2_normalize(Tensor(s * x)).data, atol=1e-12)


class TestOptim:
    def test_adamw_first_step_is_sign_times_lr(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        g = {"w": np.array([0.5, -0.1, 2.0])}
        adamw_step(p, g, OptimState(lr=0.1, weight_decay=0.0))
        np.testing.assert_allclose(p["w"], [0.9, -1.9, 2.9], atol=1e-6)

    def test_adamw_decoupled_decay(self):
        p = {"w": np.array([2.0])}
        adamw_step(p, {"w": None}, OptimState(lr=0.1, weight_decay=0.5))
        np.testing.assert_allclose(p["w"], [2.0 * (1 - 0.05)])

    def test_adamw_rejects_nan(self):
        with pytest.raises(FloatingPointError):
            adamw_step({"w": np.ones(2)}, {"w": np.array([np.nan, 0.0])}, OptimState())

    def test_onecycle_endpoints(self):
        total, lr = 101, 1e-3
        assert onecycle_lr(0, total, lr, 0.3, 25.0, 1e3) == pytest.approx(lr / 25)
        assert onecycle_lr(peak_step(total, 0.3), total, lr) == pytest.approx(lr)
        assert onecycle_lr(total - 1, total, lr, 0.3, 25.0, 1e3) == pytest.approx(lr / 1e3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 500), st.floats(0.05, 0.95))
    def test_onecycle_bounded_and_unimodal(self, total, pct):
        lrs = np.array([onecycle_lr(s, total, 1.0, pct) for s in range(total)])
        assert lrs.max() <= 1.0 + 1e-12 and lrs.min() > 0
        k = int(np.argmax(lrs))
        assert np.all(np.diff(lrs[:k + 1]) >= -1e-12)
        assert np.all(np.diff(lrs[k:]) <= 1e-12)

    def test_onecycle_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            onecycle_lr(10, 10)

    def test_clip_grad_norm(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(np.hypot(g["a"], g["b"]), 1.0)
        g = {"a": np.array([0.3])}
        clip_grad_norm(g, 1.0)
        np.testing.assert_allclose(g["a"], [0.3])


class TestRandom:
    def test_streams_reproducible_and_distinct(self):
        a = make_rng(3, "init", 2).normal(size=4)
        np.testing.assert_array_equal(a, make_rng(3, "init", 2).normal(size=4))
        assert not np.allclose(a, make_rng(3, "init", 3).normal(size=4))
        assert not np.allclose(a, make_rng(4, "init", 2).normal(size=4))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 60), st.integers(0, 2**31))
    def test_derangement_has_no_fixed_points(self, n, seed):
        p = derangement(np.random.default_rng(seed), n)
        assert sorted(p) == list(range(n))
        assert np.all(p != np.arange(n))

    def test_derangement_needs_two(self):
        with pytest.raises(ValueError):
            derangement(np.random.default_rng(0), 1)


class TestStats:
    def test_pearson_known_values(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_pearson_constant_raises(self):
        with pytest.raises(ConstantInputError):
            pearson([1, 1, 1], [1, 2, 3])

    def test_rowwise_matches_scalar(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
        np.testing.assert_allclose(rowwise_pearson(a, b), [pearson(x, y) for x, y in zip(a, b)])

    def test_rowwise_constant_is_nan(self):
        r = rowwise_pearson(np.array([[1.0, 1.0, 1.0], [1.0, 2.0, 3.0]]), np.array([[1.0, 2, 3], [1, 2, 3]]))
        assert np.isnan(r[0]) and r[1] == pytest.approx(1.0)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (2, 6), elements=finite), arrays(np.float64, (2, 6), elements=finite))
    def test_rowwise_bounded(self, a, b):
        r = rowwise_pearson(a, b)
        assert np.all((np.abs(r[~np.isnan(r)]) <= 1.0))
