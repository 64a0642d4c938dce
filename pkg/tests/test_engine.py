import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sudelab import engine as E

finite = st.floats(-2, 2, allow_nan=False)


def vec(n):
    return arrays(np.float64, n, elements=finite)


@pytest.mark.parametrize("a, b, expected", [([1, 0], [0, 0], 1.0), ([2, 3], [2, 3], 0.0), ([3, 4], [0, 0], 25.0)])
def test_mse_is_sum_of_squares(a, b, expected):
    assert E.mse(E.constant(a), E.constant(b)).item() == expected


def test_mse_shape_mismatch_names_both_shapes():
    with pytest.raises(E.ShapeError, match=r"\(2,\).*\(3,\)"):
        E.mse(E.constant([1, 2]), E.constant([1, 2, 3]))


def test_detach_freezes_one_factor():
    x = E.parameter(3.0)
    y = E.mul(E.detach(x), x)
    assert E.grad(y, [x])[0] == 3.0


def test_detach_matches_constant():
    p = E.parameter([0.3, -1.2])
    g_det = E.grad(E.mse(E.detach(p), p), [p])[0]
    g_const = E.grad(E.mse(E.constant(p.value), p), [p])[0]
    np.testing.assert_array_equal(g_det, g_const)


def test_detach_idempotent():
    x = E.parameter([1.5, 2.5])
    np.testing.assert_array_equal(E.detach(E.detach(x)).value, x.value)


def test_chain_rule_by_hand():
    w = E.parameter(1.0)
    loss = E.mse(E.mul(w, E.constant(2.0)), E.constant(0.0))
    assert E.grad(loss, [w])[0] == 8.0


def test_unreached_parameter_has_zero_grad():
    p, q = E.parameter([1.0, 2.0]), E.parameter([5.0])
    np.testing.assert_array_equal(E.grad(E.sum(E.mul(p, p)), [q])[0], [0.0])


def test_two_uses_accumulate():
    p = E.parameter(1.0)
    assert E.grad(E.add(p, p), [p])[0] == 2.0


def test_backward_rejects_non_scalar():
    p = E.parameter([1.0, 2.0])
    with pytest.raises(E.ShapeError):
        E.backward(E.mul(p, p), [p])


def test_finite_diff_square():
    report = E.finite_diff_check(lambda p: E.mul(p, p), np.array(3.0), step=1e-5)
    assert abs(report.analytic - 6.0) == 0
    assert report.max_rel_error < 1e-8


def test_finite_diff_with_detach_branch():
    def f(p):
        return E.sum(E.mul(E.detach(p), E.tanh(p)))

    x = np.array([0.4, -1.1, 0.9])
    assert not E.finite_diff_check(f, x, freeze_detached=False).passed
    assert E.finite_diff_check(f, x, freeze_detached=True).max_rel_error < 1e-8


def test_broadcast_mismatch_raises():
    with pytest.raises(E.ShapeError):
        E.add(E.constant(np.ones((2, 3))), E.constant(np.ones((3, 2))))


@settings(max_examples=40, deadline=None)
@given(vec(3), vec(3), arrays(np.float64, (3, 2), elements=finite))
def test_composite_gradient_matches_finite_differences(a, b, w):
    def f(p):
        h = E.tanh(E.add(E.matmul(E.reshape(p, (1, 3)), E.constant(w)), 0.5))
        return E.add(E.sum(E.scale(h, 1.7)), E.mse(E.sub(p, E.constant(b)), E.mul(p, p)))

    assert E.finite_diff_check(f, a, step=1e-5).max_rel_error < 1e-4


@settings(max_examples=40, deadline=None)
@given(vec(4), vec(4))
def test_detach_value_preserving_and_gradient_annihilating(x, y):
    p = E.parameter(x)
    d = E.detach(p)
    np.testing.assert_array_equal(d.value, x)
    loss = E.add(E.mse(d, E.constant(y)), E.sum(E.tanh(d)))
    assert np.all(E.grad(loss, [p])[0] == 0)


@settings(max_examples=40, deadline=None)
@given(vec(5), vec(5))
def test_outputs_finite_on_finite_inputs(x, y):
    out = E.mse(E.tanh(E.mul(E.constant(x), E.constant(y))), E.sub(E.constant(x), E.constant(y)))
    assert np.isfinite(out.value).all()
