import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossdecode.alignment import (RidgeHead, closed_form_ridge, fit_ridge_head, init_new_subject_head,
                                   init_ridge_head, ridge_forward, ridge_objective, ridge_penalty)
from crossdecode.numerics import Tensor

from .oracles import gradient_ridge


def problem(seed, n=200, p=30, q=10):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    Y = X @ rng.normal(size=(p, q)) + 0.1 * rng.normal(size=(n, q))
    return X, Y


class TestClosedForm:
    def test_normal_equations(self):
        X, Y = problem(0)
        W = closed_form_ridge(X, Y, 0.5)
        np.testing.assert_allclose((X.T @ X + 0.5 * np.eye(30)) @ W, X.T @ Y, atol=1e-9)

    def test_gradient_descent_agrees(self):
        X, Y = problem(1)
        rmse = np.sqrt(np.mean((gradient_ridge(X, Y, 1.0) - closed_form_ridge(X, Y, 1.0)) ** 2))
        assert rmse < 1e-3

    def test_dual_form_when_wide(self):
        rng = np.random.default_rng(2)
        X, Y = rng.normal(size=(10, 40)), rng.normal(size=(10, 3))
        W = closed_form_ridge(X, Y, 0.3)
        np.testing.assert_allclose(W, np.linalg.solve(X.T @ X + 0.3 * np.eye(40), X.T @ Y), atol=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 10.0))
    def test_minimizes_objective(self, seed, lam):
        X, Y = problem(seed, n=40, p=8, q=3)
        W = closed_form_ridge(X, Y, lam)
        rng = np.random.default_rng(seed)
        for _ in range(3):
            assert ridge_objective(X, Y, W, lam) <= ridge_objective(X, Y, W + 1e-3 * rng.normal(size=W.shape), lam)

    def test_shrinks_with_lambda(self):
        X, Y = problem(3)
        norms = [np.linalg.norm(closed_form_ridge(X, Y, lam)) for lam in (0.1, 10.0, 1000.0)]
        assert norms[0] > norms[1] > norms[2]

    @pytest.mark.parametrize("bad", ["lam", "rows", "empty", "nan"])
    def test_errors(self, bad):
        X, Y = problem(0, n=5, p=3, q=2)
        if bad == "lam":
            args = (X, Y, 0.0)
        elif bad == "rows":
            args = (X, Y[:4], 1.0)
        elif bad == "empty":
            args = (X[:0], Y[:0], 1.0)
        else:
            X[0, 0] = np.nan
            args = (X, Y, 1.0)
        with pytest.raises(ValueError):
            closed_form_ridge(*args)


class TestHead:
    def test_forward_is_affine(self):
        rng = np.random.default_rng(0)
        head = RidgeHead(1, Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=4)))
        V = rng.normal(size=(3, 6))
        np.testing.assert_allclose(ridge_forward(V, head).data, V @ head.weight.data.T + head.bias.data)

    def test_activation_applied_last(self):
        head = RidgeHead(1, Tensor(-np.eye(3)), Tensor(np.zeros(3)), activation="relu")
        np.testing.assert_array_equal(ridge_forward(np.ones((1, 3)), head).data, np.zeros((1, 3)))

    def test_dimension_mismatch(self):
        head = RidgeHead(1, Tensor(np.zeros((4, 6))), None)
        with pytest.raises(ValueError):
            ridge_forward(np.zeros((2, 5)), head)

    def test_penalty(self):
        head = RidgeHead(1, Tensor(np.full((2, 2), 2.0)), None, l2_penalty=0.5)
        assert float(ridge_penalty(head).data) == pytest.approx(8.0)

    def test_fit_with_intercept_recovers_affine_map(self):
        rng = np.random.default_rng(4)
        V = rng.normal(size=(300, 12))
        W, b = rng.normal(size=(5, 12)), rng.normal(size=5)
        head = fit_ridge_head(1, V, V @ W.T + b, lam=1e-8, dtype=np.float64)
        np.testing.assert_allclose(head.weight.data, W, atol=1e-6)
        np.testing.assert_allclose(head.bias.data, b, atol=1e-6)

    def test_init_bound(self):
        head = init_ridge_head(1, 100, 8, np.random.default_rng(0))
        assert np.abs(head.weight.data).max() <= 0.1
        assert head.weight.data.dtype == np.float32

    def test_new_subject_zero(self):
        head = init_new_subject_head(5, 20, 8)
        assert head.weight.shape == (8, 20) and not head.weight.data.any() and not head.bias.data.any()

    def test_new_subject_warmstart(self):
        rng = np.random.default_rng(0)
        V = rng.normal(size=(50, 20))
        head = init_new_subject_head(5, 20, 8, "closed_form_warmstart", V, rng.normal(size=(50, 8)), lam=1.0)
        assert head.weight.shape == (8, 20) and head.subject_id == 5

    @pytest.mark.parametrize("kwargs", [{"strategy": "bogus"}, {"strategy": "closed_form_warmstart"},
                                        {"n_voxels": 0}])
    def test_new_subject_errors(self, kwargs):
        args = {"subject_id": 1, "n_voxels": 20, "d0": 8, **kwargs}
        with pytest.raises(ValueError):
            init_new_subject_head(**args)
