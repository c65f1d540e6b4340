"""Tensor core: forward oracles, broadcasting semantics, and gradient fidelity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dupscope import tensor as T
from dupscope.errors import NonFiniteResult, NotScalar, ShapeMismatch
from dupscope.tensor import Tensor


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# forward oracles
# ---------------------------------------------------------------------------


class TestElementwise:
    def test_silu_at_zero(self):
        assert T.silu(t64(0.0)).item() == 0.0

    def test_elu_shift_at_zero(self):
        assert (T.elu(t64(0.0)) + 1.0).item() == 1.0

    def test_exp_matches_scalar_loop(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3))
        got = T.texp(t64(x)).numpy()
        want = np.empty_like(x)
        for i in range(2):
            for j in range(3):
                want[i, j] = np.exp(x[i, j])
        np.testing.assert_allclose(got, want, rtol=0, atol=0)

    def test_div_guard_keeps_result_finite(self):
        out = T.div(t64([1.0]), t64([0.0]))
        assert np.isfinite(out.numpy()).all()

    def test_log_guard_keeps_result_finite(self):
        out = T.tlog(t64([0.0]))
        assert np.isfinite(out.numpy()).all()

    def test_nonfinite_result_raises(self):
        with pytest.raises(NonFiniteResult):
            T.texp(t64([1000.0]))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeMismatch):
            T.add(t64(np.zeros((2, 3))), t64(np.zeros((4,))))

    def test_dispatch_table(self):
        x = t64([[0.5, -0.5]])
        np.testing.assert_allclose(
            T.elementwise("mul", x, x).numpy(), x.numpy() ** 2
        )
        np.testing.assert_allclose(
            T.elementwise("sigmoid", t64(0.0)).numpy(), 0.5
        )


class TestMatmul:
    def test_identity(self):
        m = np.arange(9, dtype=np.float64).reshape(3, 3)
        out = T.matmul(t64(np.eye(3)), t64(m))
        np.testing.assert_array_equal(out.numpy(), m)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(3, 2))
        want = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                for k in range(3):
                    want[i, j] += a[i, k] * b[k, j]
        got = T.matmul(t64(a), t64(b)).numpy()
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_batch_shape(self):
        a = t64(np.zeros((4, 2, 3)))
        b = t64(np.zeros((4, 3, 5)))
        assert T.matmul(a, b).shape == (4, 2, 5)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeMismatch):
            T.matmul(t64(np.zeros((2, 3))), t64(np.zeros((2, 3))))


class TestSoftmax:
    def test_uniform_on_constant(self):
        out = T.softmax(t64([0.0, 0.0, 0.0])).numpy()
        np.testing.assert_allclose(out, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_analytic_values(self):
        out = T.softmax(t64(np.log([1.0, 2.0, 3.0]))).numpy()
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = T.softmax(t64(rng.normal(size=(5, 7)) * 10), axis=-1).numpy()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestScanOps:
    def test_cumsum_matches_numpy(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 6, 3))
        out = T.cumsum(t64(x), axis=1).numpy()
        np.testing.assert_allclose(out, np.cumsum(x, axis=1), atol=1e-12)

    def test_linear_recurrence_matches_step_loop(self):
        rng = np.random.default_rng(9)
        d = rng.uniform(0.1, 0.9, size=(2, 6, 4))
        b = rng.normal(size=(2, 6, 4))
        out = T.linear_recurrence(t64(d), t64(b), axis=1).numpy()
        h = np.zeros((2, 4))
        for k in range(6):
            h = d[:, k] * h + b[:, k]
            np.testing.assert_array_equal(out[:, k], h)

    def test_topk_row_mean_excludes_diagonal(self):
        m = np.full((1, 3, 3), 0.1)
        np.fill_diagonal(m[0], 9.0)
        m[0, 0, 1] = 0.5
        out = T.topk_row_mean(t64(m), k=1).numpy()
        np.testing.assert_allclose(out[0], [0.5, 0.1, 0.1])


# ---------------------------------------------------------------------------
# broadcasting and shape round trips
# ---------------------------------------------------------------------------


small_dims = st.integers(min_value=1, max_value=4)


@st.composite
def broadcastable_pair(draw):
    rank = draw(st.integers(min_value=1, max_value=4))
    base = [draw(small_dims) for _ in range(rank)]
    other = []
    for d in base:
        choice = draw(st.sampled_from(["same", "one", "drop"]))
        if choice == "same":
            other.append(d)
        elif choice == "one":
            other.append(1)
        else:
            other.append(None)
    while other and other[0] is None:
        other.pop(0)
    other = [1 if d is None else d for d in other]
    return tuple(base), tuple(other) if other else (1,)


@given(broadcastable_pair())
@settings(max_examples=60, deadline=None)
def test_broadcast_matches_numpy_rule(shapes):
    sa, sb = shapes
    rng = np.random.default_rng(0)
    a = rng.normal(size=sa)
    b = rng.normal(size=sb)
    out = T.mul(t64(a), t64(b))
    np.testing.assert_allclose(out.numpy(), a * b, atol=1e-12)


@given(broadcastable_pair())
@settings(max_examples=60, deadline=None)
def test_broadcast_backward_restores_input_shapes(shapes):
    sa, sb = shapes
    rng = np.random.default_rng(1)
    a = t64(rng.normal(size=sa), grad=True)
    b = t64(rng.normal(size=sb), grad=True)
    T.mul(a, b).sum().backward()
    assert a.grad.shape == a.shape
    assert b.grad.shape == b.shape


@given(
    st.lists(small_dims, min_size=1, max_size=4),
)
@settings(max_examples=60, deadline=None)
def test_flatten_unflatten_roundtrip(shape):
    rng = np.random.default_rng(2)
    x = rng.normal(size=tuple(shape))
    t = t64(x)
    back = T.reshape(T.reshape(t, (-1,)), tuple(shape))
    np.testing.assert_array_equal(back.numpy(), x)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


class TestBackward:
    def test_linear_map_gradient(self):
        rng = np.random.default_rng(13)
        w = t64(rng.normal(size=(3, 4)), grad=True)
        x = rng.normal(size=(4, 1))
        loss = T.matmul(w, t64(x)).sum()
        loss.backward()
        want = np.ones((3, 1)) @ x.T  # outer(1, x)
        np.testing.assert_allclose(w.grad, want, atol=1e-12)

    def test_sigmoid_grad_at_zero(self):
        x = t64(0.0, grad=True)
        T.sigmoid(x).backward()
        np.testing.assert_allclose(x.grad, 0.25, atol=1e-12)

    def test_backward_requires_scalar(self):
        x = t64(np.zeros((2, 2)), grad=True)
        with pytest.raises(NotScalar):
            (x + 1.0).backward()

    def test_disconnected_graph_warns(self):
        x = t64(np.zeros(3), grad=False)
        with pytest.warns(T.DisconnectedGraphWarning):
            (x.sum()).backward()

    def test_shared_subexpression_not_double_counted(self):
        x = t64(2.0, grad=True)
        y = x * 3.0
        (y + y).backward()  # d/dx (6x) = 6
        np.testing.assert_allclose(x.grad, 6.0)

    def test_grad_accumulates_across_uses(self):
        x = t64([1.0, 2.0], grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])


UNARY_CASES = [
    ("exp", T.texp, (-1.0, 1.0)),
    ("log", T.tlog, (0.2, 3.0)),
    ("elu", T.elu, (-2.0, 2.0)),
    ("silu", T.silu, (-2.0, 2.0)),
    ("sigmoid", T.sigmoid, (-2.0, 2.0)),
    ("softplus", T.softplus, (-2.0, 2.0)),
    ("sqrt", T.tsqrt, (0.3, 3.0)),
    ("neg", T.neg, (-2.0, 2.0)),
]


@pytest.mark.parametrize("name,op,rng_range", UNARY_CASES)
def test_unary_grad_matches_central_difference(name, op, rng_range):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = rng.uniform(*rng_range, size=(2, 3))
    report = T.grad_check(lambda t: op(t).sum(), t64(x, grad=True))
    assert report.passed, report


BINARY_CASES = [
    ("add", T.add),
    ("sub", T.sub),
    ("mul", T.mul),
    ("div", T.div),
]


@pytest.mark.parametrize("name,op", BINARY_CASES)
def test_binary_grad_matches_central_difference(name, op):
    rng = np.random.default_rng(17)
    a = rng.uniform(0.5, 2.0, size=(2, 3))
    b = rng.uniform(0.5, 2.0, size=(3,))
    bt = t64(b)
    report = T.grad_check(lambda t: op(t, bt).sum(), t64(a, grad=True))
    assert report.passed, report
    at = t64(a)
    report = T.grad_check(lambda t: op(at, t).sum(), t64(b, grad=True))
    assert report.passed, report


REDUCE_CASES = [
    ("sum", lambda t: T.tsum(t, axis=1).sum()),
    ("mean", lambda t: T.tmean(t, axis=(0, 2)).sum()),
    ("softmax", lambda t: (T.softmax(t, axis=-1) * T.softmax(t, axis=-1)).sum()),
    ("matmul", lambda t: T.matmul(t, T.transpose(t, (0, 2, 1))).sum()),
    ("cumsum", lambda t: (T.cumsum(t, axis=1) * T.cumsum(t, axis=1)).sum()),
    ("clamp", lambda t: T.clamp(t, -0.5, 0.5).sum()),
    ("broadcast", lambda t: T.broadcast_to(T.reshape(t, (2, 3, 4, 1)), (2, 3, 4, 5)).sum()),
    ("topk", lambda t: T.topk_row_mean(T.matmul(t, T.transpose(t, (0, 2, 1))), k=2).sum()),
]


@pytest.mark.parametrize("name,fn", REDUCE_CASES)
def test_structured_ops_grad_matches_central_difference(name, fn):
    rng = np.random.default_rng(23)
    x = rng.normal(size=(2, 3, 4))
    report = T.grad_check(fn, t64(x, grad=True))
    assert report.passed, report


def test_linear_recurrence_grads():
    rng = np.random.default_rng(29)
    d = rng.uniform(0.2, 0.9, size=(2, 5, 3))
    b = rng.normal(size=(2, 5, 3))
    bt = t64(b)

    report = T.grad_check(
        lambda t: T.linear_recurrence(t, bt, axis=1).sum(),
        t64(d, grad=True),
    )
    assert report.passed, report
    dt = t64(d)
    report = T.grad_check(
        lambda t: (T.linear_recurrence(dt, t, axis=1) * T.linear_recurrence(dt, t, axis=1)).sum(),
        t64(b, grad=True),
    )
    assert report.passed, report


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------


class TestGradCheck:
    def test_square_function(self):
        x = t64([3.0], grad=True)
        report = T.grad_check(lambda t: (t * t).sum(), x, h=1e-5)
        assert report.passed
        x.zero_grad()
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [6.0], atol=1e-6)

    def test_constant_function(self):
        x = t64([1.0, 2.0], grad=True)
        c = t64([5.0])
        report = T.grad_check(lambda t: (t * 0.0).sum() + c.sum(), x)
        assert report.passed
        assert report.max_abs_err < 1e-7

    def test_nondeterministic_function_detected(self):
        state = {"n": 0}

        def f(t):
            state["n"] += 1
            return (t * float(state["n"])).sum()

        with pytest.raises(T.NonDeterministicFunction):
            T.grad_check(f, t64([1.0], grad=True))

    def test_sampling_limits_coordinates(self):
        x = t64(np.random.default_rng(0).normal(size=(10, 10)), grad=True)
        report = T.grad_check(lambda t: (t * t).sum(), x, sample=7)
        assert report.n_checked == 7
        assert report.passed
