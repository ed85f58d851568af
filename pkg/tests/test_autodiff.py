import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qflow import autodiff as ad
from qflow.autodiff import NonFiniteError, ShapeError, Value

from gradcases import LOSS_CASES, OP_NAMES, worst_loss_error, worst_op_error


def test_square_derivative():
    x = ad.parameter(3.0)
    ad.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_softplus_at_zero():
    x = ad.parameter(0.0)
    y = ad.softplus(x, beta=20.0)
    assert y.item() == pytest.approx(np.log(2) / 20, rel=1e-12)
    ad.backward(y)
    assert x.grad == pytest.approx(0.5)


def test_log1pexp_large_input_no_overflow():
    with np.errstate(over="raise"):
        y = ad.log1pexp(Value(50.0))
        z = ad.log1pexp(Value(800.0))
    assert y.item() == pytest.approx(50.0 + np.exp(-50.0), rel=1e-15)
    assert z.item() == 800.0


@given(st.floats(-700, 700))
def test_log1pexp_logistic_identity(x):
    a = ad.log1pexp(Value(x)).item()
    b = ad.log1pexp(Value(-x)).item()
    assert a - b == pytest.approx(x, abs=1e-12 * max(1.0, abs(x)))


def test_sum_and_mean_gradients():
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))
    y = ad.parameter(np.arange(5.0))
    ad.backward(ad.mean(y))
    assert np.allclose(y.grad, 0.2)


def test_composite_chain_rule_against_finite_difference():
    x = ad.parameter(1.0)
    ad.backward(ad.log1pexp(ad.scale(x, 3.0)))
    h = 1e-6
    f = lambda v: np.log1p(np.exp(3 * v))  # noqa: E731
    oracle = (f(1 + h) - f(1 - h)) / (2 * h)
    assert x.grad == pytest.approx(oracle, rel=1e-8)
    assert x.grad == pytest.approx(2.8577, abs=1e-4)


def test_grad_check_half_sqnorm():
    rng = np.random.default_rng(0)
    err = ad.grad_check(lambda v: ad.scale(ad.sqnorm(v), 0.5), rng.normal(size=7), eps=1e-5)
    assert err < 1e-8


def test_grad_check_rejects_bad_eps_and_nonfinite():
    with pytest.raises(ValueError):
        ad.grad_check(ad.sum, np.ones(2), eps=1e-2)
    with pytest.raises(NonFiniteError):
        ad.grad_check(lambda v: ad.sum(ad.log(v)), np.array([-1.0, 1.0]), eps=1e-6)


def test_backward_requires_scalar():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ShapeError):
        ad.backward(ad.scale(x, 2.0))


def test_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Value(np.ones((2, 3))), Value(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(Value(np.ones((2, 3))), Value(np.ones((3, 2))))


def test_rank_limit():
    with pytest.raises(ShapeError):
        Value(np.zeros((2, 2, 2)))


def test_each_node_visited_once():
    calls = []
    x = ad.parameter(2.0)
    y = ad.mul(x, x)
    orig = y._backward

    def spy(g, out):
        calls.append(1)
        orig(g, out)

    y._backward = spy
    z = ad.add(ad.add(y, y), y)  # y reached along three edges
    ad.backward(z)
    assert len(calls) == 1
    assert x.grad == pytest.approx(12.0)


def test_leaf_grads_accumulate_until_zeroed():
    x = ad.parameter(np.array([1.0, 2.0]))
    ad.backward(ad.sum(x))
    ad.backward(ad.sum(x))
    assert np.array_equal(x.grad, [2.0, 2.0])
    ad.zero_grad([x])
    assert x.grad is None


def test_no_grad_records_nothing():
    x = ad.parameter(np.ones(3))
    with ad.no_grad():
        y = ad.sum(ad.exp(x))
    assert not y.requires_grad and y._parents == ()
    assert ad.is_grad_enabled()


def test_tape_records_and_resets():
    x = ad.parameter(np.ones(3))
    with ad.Tape() as tape:
        ad.sum(ad.mul(x, x))
        assert len(tape) == 2
        tape.reset()
        assert len(tape) == 0


def test_broadcast_gradient_reduces_to_bias_shape():
    x = Value(np.ones((4, 3)))
    b = ad.parameter(np.zeros(3))
    ad.backward(ad.sum(ad.add(x, b)))
    assert np.array_equal(b.grad, np.full(3, 4.0))


def test_operator_sugar_matches_functions():
    a, b = Value(np.array([1.0, 2.0])), Value(np.array([3.0, 5.0]))
    assert np.array_equal((a + b).data, [4, 7])
    assert np.array_equal((a - b).data, [-2, -3])
    assert np.array_equal((a * b).data, [3, 10])
    assert np.array_equal((-a).data, [-1, -2])
    assert np.allclose((a / 2.0).data, [0.5, 1.0])


# ------------------------------------------------------------ op-by-op gradient suite

@pytest.mark.parametrize("name", OP_NAMES)
def test_op_gradient_random_instances(name):
    worst = worst_op_error(name, 100)
    assert worst < 1e-5, (name, worst)


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
def test_composite_loss_gradients(name):
    worst = worst_loss_error(name, 10)
    assert worst < 1e-5, (name, worst)
