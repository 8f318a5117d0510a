import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dyncoef import gradtensor as gt
from dyncoef.gradtensor import (
    ContractError,
    DimensionError,
    DomainError,
    Tape,
    Tensor,
    central_difference,
    finite_diff_check,
)


def rel_err(a, b):
    return np.max(np.abs(a - b) / (np.abs(b) + 1e-8))


def grad_of(f, *xs):
    with Tape() as tape:
        y = f(*xs)
    return tape.gradients(y, list(xs))


def check_all(f, xs, tol=1e-6):
    analytic = grad_of(f, *xs)
    for x, g in zip(xs, analytic):
        numeric = central_difference(lambda _: f(*xs), x)
        assert rel_err(g, numeric) < tol


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(gt.matmul(a, b).values, [[1, 2], [3, 4]])

    def test_row_times_column(self):
        out = gt.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.values.tolist() == [[11.0]]

    def test_grads_match_finite_differences(self, rng):
        a = gt.parameter(rng.standard_normal((3, 4)))
        b = gt.parameter(rng.standard_normal((4, 2)))
        w = rng.standard_normal((3, 2))
        check_all(lambda a, b: gt.reduce(gt.matmul(a, b) * w, "sum"), [a, b])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            gt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestHadamard:
    def test_zero_annihilator(self):
        assert gt.hadamard(Tensor([1.0, 2, 3]), Tensor([0.0, 0, 0])).values.tolist() == [0, 0, 0]

    def test_identity(self):
        assert gt.hadamard(Tensor([1.0, 2, 3]), Tensor([1.0, 1, 1])).values.tolist() == [1, 2, 3]

    def test_grads(self, rng):
        a = gt.parameter(rng.standard_normal(5))
        b = gt.parameter(rng.standard_normal(5))
        check_all(lambda a, b: gt.reduce(gt.square(a * b), "sum"), [a, b])

    def test_row_broadcast_grads(self, rng):
        a = gt.parameter(rng.standard_normal((4, 3)))
        b = gt.parameter(rng.standard_normal(3))
        check_all(lambda a, b: gt.reduce(gt.sin(a * b), "sum"), [a, b])

    def test_incompatible(self):
        with pytest.raises(DimensionError):
            gt.hadamard(Tensor(np.ones(3)), Tensor(np.ones(4)))


class TestElementwise:
    def test_relu(self):
        assert gt.elementwise(Tensor([-1.0, 0.0, 2.0]), "relu").values.tolist() == [0, 0, 2]

    def test_sigmoid_zero(self):
        assert gt.elementwise(Tensor([0.0]), "sigmoid").values.tolist() == [0.5]

    def test_sigmoid_extremes_finite(self):
        out = gt.sigmoid(Tensor([-800.0, 800.0])).values
        assert out.tolist() == [0.0, 1.0]

    def test_sqrt_negative(self):
        with pytest.raises(DomainError):
            gt.sqrt(Tensor([-1.0]))

    def test_unknown(self):
        with pytest.raises(ValueError):
            gt.elementwise(Tensor([1.0]), "tanh")

    def test_leaky_relu_default_slope(self):
        out = gt.elementwise(Tensor([-2.0, 3.0]), "leaky_relu").values
        np.testing.assert_allclose(out, [-0.02, 3.0])

    @pytest.mark.parametrize("fn", ["leaky_relu", "relu", "sigmoid", "exp", "sqrt", "neg"])
    def test_grads(self, fn, rng):
        x = rng.uniform(-2, 2, 20)
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep away from kinks
        if fn == "sqrt":
            x = np.abs(x) + 0.1
        t = gt.parameter(x)
        err = finite_diff_check(lambda v: gt.reduce(gt.elementwise(v, fn) * np.arange(1.0, 21.0), "sum"), t)
        assert err < 1e-6

    def test_leaky_relu_custom_alpha(self, rng):
        t = gt.parameter(rng.uniform(0.1, 1, 6) * rng.choice([-1, 1], 6))
        assert finite_diff_check(lambda v: gt.reduce(gt.leaky_relu(v, 0.2) * 2.0, "sum"), t) < 1e-6


class TestReduce:
    def test_sum(self):
        assert gt.reduce(Tensor([1.0, 2, 3]), "sum").item() == 6

    def test_mean_constant(self):
        assert gt.reduce(Tensor(np.full((3, 4), 2.5)), "mean").item() == 2.5

    @pytest.mark.parametrize("op", ["sum", "mean"])
    @pytest.mark.parametrize("axis", [None, 0, 1, -1])
    def test_grads(self, op, axis, rng):
        x = gt.parameter(rng.standard_normal((3, 4)))
        w = rng.standard_normal(gt.reduce(Tensor(x.values), op, axis).shape)
        assert finite_diff_check(lambda v: gt.reduce(gt.reduce(v, op, axis) * w, "sum"), x) < 1e-6

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            gt.reduce(Tensor(np.ones((2, 2))), "sum", axis=2)


class TestShapeOps:
    def test_concat_take_cumsum_grads(self, rng):
        a = gt.parameter(rng.standard_normal((4, 2)))
        b = gt.parameter(rng.standard_normal((4, 3)))
        w = rng.standard_normal((4, 5))

        def f(a, b):
            c = gt.concat([a, b], axis=1)
            return gt.reduce(gt.cumsum(c, axis=1) * w, "sum") + gt.reduce(gt.square(c[1:3, ::2]), "sum")

        check_all(f, [a, b])

    def test_scatter_rows_and_fancy_take(self, rng):
        a = gt.parameter(rng.standard_normal((3, 2)))
        idx = np.array([4, 0, 2])
        w = rng.standard_normal((5, 2))

        def f(a):
            s = gt.scatter_rows(a, idx, 5)
            return gt.reduce(s * w, "sum") + gt.reduce(gt.take(a, np.array([0, 0, 2])), "sum")

        check_all(f, [a])

    def test_sparse_matmul(self, rng):
        import scipy.sparse as sp

        s = sp.random(6, 4, density=0.5, random_state=3, format="csr")
        x = gt.parameter(rng.standard_normal((4, 3)))
        w = rng.standard_normal((6, 3))
        check_all(lambda x: gt.reduce(gt.sparse_matmul(s, x) * w, "sum"), [x])

    def test_linear(self, rng):
        x = gt.parameter(rng.standard_normal((5, 3)))
        w = gt.parameter(rng.standard_normal((3, 2)))
        b = gt.parameter(rng.standard_normal(2))
        np.testing.assert_allclose(gt.linear(x, w, b).values, x.values @ w.values + b.values, atol=1e-14)
        check_all(lambda x, w, b: gt.reduce(gt.sigmoid(gt.linear(x, w, b)), "sum"), [x, w, b])


class TestBackward:
    def test_identity_chain(self):
        x = gt.parameter([3.0])
        with Tape() as tape:
            y = gt.reshape(x, ())
        tape.backward(y)
        assert x.grad.tolist() == [1.0]

    def test_quadratic(self):
        x = gt.parameter([1.0, 2.0])
        with Tape() as tape:
            y = gt.reduce(x * x, "sum")
        gt.backward(y, tape)
        assert x.grad.tolist() == [2.0, 4.0]

    def test_repeated_backward_accumulates(self):
        x = gt.parameter([1.0, 2.0])
        with Tape() as tape:
            y = gt.reduce(x * x, "sum")
        tape.backward(y)
        tape.backward(y)
        assert x.grad.tolist() == [4.0, 8.0]

    def test_default_tape(self):
        gt.reset_tape()
        x = gt.parameter([1.0, 2.0])
        y = gt.reduce(x * 3.0, "sum")
        gt.backward(y)
        gt.reset_tape()
        assert x.grad.tolist() == [3.0, 3.0]

    def test_non_scalar(self):
        x = gt.parameter([1.0, 2.0])
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_unreachable_has_no_grad(self):
        x = gt.parameter([1.0])
        z = gt.parameter([5.0])
        with Tape() as tape:
            y = gt.reduce(x * 2.0, "sum")
        tape.backward(y)
        assert z.grad is None
        assert tape.gradients(y, [z])[0].tolist() == [0.0]

    def test_linearity_of_accumulation(self, rng):
        x = gt.parameter(rng.standard_normal(4))

        def f(v):
            return gt.reduce(gt.sigmoid(v), "sum")

        def g(v):
            return gt.reduce(gt.exp(v) * v, "sum")

        gf = grad_of(f, x)[0]
        gg = grad_of(g, x)[0]
        gfg = grad_of(lambda v: f(v) + g(v), x)[0]
        np.testing.assert_allclose(gfg, gf + gg, rtol=1e-14, atol=1e-14)

    def test_no_grad_values_bitwise_identical(self, rng):
        x = gt.parameter(rng.standard_normal((6, 3)))
        w = gt.parameter(rng.standard_normal((3, 4)))

        def f():
            return gt.reduce(gt.leaky_relu(gt.matmul(x, w)), "mean", axis=0)

        with Tape():
            a = f().values
        with gt.no_grad():
            b = f().values
        assert np.array_equal(a, b)

    def test_separate_threads_have_separate_tapes(self):
        import threading

        x = gt.parameter([2.0])
        results = {}

        def work(k):
            with Tape() as tape:
                y = gt.reduce(x * float(k), "sum")
            results[k] = tape.gradients(y, [x])[0][0]

        threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {1: 1.0, 2: 2.0, 3: 3.0, 4: 4.0}


class TestFiniteDiffCheck:
    def test_sum_is_exact(self, rng):
        x = gt.parameter(rng.standard_normal(7))
        assert finite_diff_check(lambda v: gt.reduce(v, "sum"), x) < 1e-10

    def test_sum_sigmoid(self, rng):
        x = gt.parameter(rng.standard_normal(7))
        assert finite_diff_check(lambda v: gt.reduce(gt.sigmoid(v), "sum"), x) < 1e-6

    def test_restores_input(self, rng):
        x = gt.parameter(rng.standard_normal(5))
        before = x.values.copy()
        finite_diff_check(lambda v: gt.reduce(gt.exp(v), "sum"), x)
        assert np.array_equal(x.values, before)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       arrays(np.float64, (4,), elements=st.floats(-3, 3)))
def test_composite_grads_property(a, b):
    x = gt.parameter(a)
    y = gt.parameter(b)
    f = lambda x, y: gt.reduce(gt.sigmoid(x * y) * gt.exp(gt.neg(gt.square(x))), "sum")
    analytic = grad_of(f, x, y)
    for t, g in zip((x, y), analytic):
        num = central_difference(lambda _: f(x, y), t)
        np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-8)
