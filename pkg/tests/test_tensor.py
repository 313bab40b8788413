import math

import numpy as np
import pytest

from proseco import tensor as T
from proseco.errors import ContractError, DegenerateError, OracleError
from proseco.tensor import Tensor, grad_check


def numeric_grad(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences on a plain float64 numpy function."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


class TestMatmul:
    def test_identity(self):
        out = Tensor(np.eye(2)) @ Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_basis_selection(self):
        out = Tensor([[1.0, 0.0]]) @ Tensor([[5.0], [7.0]])
        np.testing.assert_array_equal(out.data, [[5]])

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_gradient_against_finite_differences(self, rng):
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
        (a @ b).sum().backward()
        na = numeric_grad(lambda x: (x @ b0).sum(), a0.copy(), 1e-3)
        nb = numeric_grad(lambda x: (a0 @ x).sum(), b0.copy(), 1e-3)
        assert np.abs(a.grad - na).max() < 1e-3
        assert np.abs(b.grad - nb).max() < 1e-3

    def test_batched_forms(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        assert (a @ b).shape == (2, 3, 5)
        err = grad_check(lambda x: (x @ b).sum(), a)
        assert err < 1e-2


class TestMaskedSoftmax:
    def test_uniform(self):
        out = T.masked_softmax_rows(Tensor(np.zeros((1, 4))))
        np.testing.assert_allclose(out.data, 0.25, atol=1e-7)

    def test_masked_middle(self):
        mask = np.array([[True, False, True]])
        out = T.masked_softmax_rows(Tensor([[0.0, -1e9, 0.0]]), mask)
        np.testing.assert_allclose(out.data, [[0.5, 0.0, 0.5]], atol=1e-7)
        assert out.data[0, 1] == 0.0

    def test_two_entries_scalar_oracle(self):
        out = T.masked_softmax_rows(Tensor([[1.0, 2.0]]))
        e = math.e
        np.testing.assert_allclose(out.data, [[1 / (1 + e), e / (1 + e)]], atol=1e-6)

    def test_fully_masked_row(self):
        with pytest.raises(DegenerateError):
            T.masked_softmax_rows(Tensor(np.zeros((2, 2))), np.array([[True, False], [False, False]]))

    def test_rows_sum_to_one(self, rng):
        mask = rng.random((6, 9)) < 0.7
        mask[:, 0] = True
        out = T.masked_softmax_rows(Tensor(rng.normal(size=(6, 9)) * 5), mask)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out.data[~mask] == 0.0)

    def test_large_logits_stay_finite(self, rng):
        x = Tensor(rng.uniform(-1e4, 1e4, size=(4, 5)), requires_grad=True)
        probs = T.masked_softmax_rows(x)
        (probs * Tensor(rng.normal(size=(4, 5)))).sum().backward()
        assert np.all(np.isfinite(probs.data)) and np.all(np.isfinite(x.grad))


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square(self):
        x = Tensor([2.0, -1.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [4, -2])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_loss_off_tape(self):
        with pytest.raises(ContractError):
            Tensor([1.0]).sum().backward()

    def test_fan_out_accumulates(self, rng):
        """loss = f(x) + f(x) gives exactly twice the gradient of f(x)."""
        x0, c = rng.normal(size=5), Tensor(rng.normal(size=5))

        def f(x):
            return (T.sigmoid(x) * c).sum()

        x1 = Tensor(x0, requires_grad=True)
        f(x1).backward()
        x2 = Tensor(x0, requires_grad=True)
        (f(x2) + f(x2)).backward()
        np.testing.assert_array_equal(x2.grad, 2 * x1.grad)

    def test_replay_is_bit_identical(self, rng):
        x0, w0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

        def run():
            x, w = Tensor(x0, requires_grad=True), Tensor(w0, requires_grad=True)
            (T.l2_normalize(x @ w) * T.sigmoid(x @ w)).sum().backward()
            return x.grad.copy(), w.grad.copy()

        (a1, b1), (a2, b2) = run(), run()
        assert np.array_equal(a1, a2) and np.array_equal(b1, b2)

    def test_no_grad_builds_no_tape(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with T.no_grad():
            y = (x * x).sum()
        assert not y.requires_grad


class TestOps:
    """Every op's analytic gradient against 64-bit finite differences."""

    @pytest.mark.parametrize("name,fn", [
        ("exp", lambda x: T.exp(x).sum()),
        ("log", lambda x: T.log(T.exp(x) + 1.0).sum()),
        ("relu", lambda x: T.relu(x).sum()),
        ("sigmoid", lambda x: T.sigmoid(x).sum()),
        ("tanh", lambda x: T.tanh(x).sum()),
        ("div", lambda x: (x / (T.exp(x) + 1.0)).sum()),
        ("scale", lambda x: (x * 3.5).sum()),
        ("mean", lambda x: (x * x).mean()),
        ("l2_normalize", lambda x: (T.l2_normalize(x) * Tensor(np.arange(12.0).reshape(3, 4))).sum()),
        ("softmax", lambda x: (T.masked_softmax_rows(x) * Tensor(np.arange(12.0).reshape(3, 4))).sum()),
        ("gather", lambda x: T.gather(x, [2, 0, 2], axis=0).sum() + T.gather(x, [1, 3], axis=1).sum()),
        ("getitem", lambda x: (x[:, 1] * x[:, 2]).sum()),
        ("concat", lambda x: (T.concat([x, x * 2.0], axis=1) * Tensor(np.arange(24.0).reshape(3, 8))).sum()),
        ("stack", lambda x: T.stack([x, x * x], axis=0).sum()),
        ("transpose", lambda x: (x.T @ x).sum()),
        ("maximum", lambda x: T.maximum(x, Tensor(np.full((3, 4), 0.1))).sum()),
        ("scatter_add", lambda x: (T.scatter_add(x, [0, 0, 2], 4, axis=0) * Tensor(np.arange(16.0).reshape(4, 4))).sum()),
    ])
    def test_grad(self, name, fn, rng):
        x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 4)))
        # keep clear of relu/maximum kinks
        x.data[np.abs(x.data) < 0.05] += 0.2
        x.data[np.abs(x.data - 0.1) < 0.05] += 0.2
        assert grad_check(fn, x, step=1e-4) < 1e-2, name

    def test_broadcast_add_reduces_grad(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        (a + b).sum().backward()
        np.testing.assert_array_equal(b.grad, [3, 3, 3, 3])

    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).data.dtype == np.float32
        with T.precision(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64


class TestGradCheck:
    def test_sum_is_exact(self, rng):
        assert grad_check(lambda x: x.sum(), Tensor(rng.normal(size=7))) < 1e-6

    def test_negative_control(self, rng):
        def broken(x):
            return T.make_op(x.data * x.data, (x,), lambda g: ((x, g * x.data),), "broken").sum()

        assert grad_check(broken, Tensor(rng.uniform(0.5, 1.5, size=4))) > 0.1

    def test_nondeterministic_function(self):
        counter = iter(range(100))

        def f(x):
            return (x * float(next(counter))).sum()

        with pytest.raises(OracleError):
            grad_check(f, Tensor([1.0, 2.0]))
