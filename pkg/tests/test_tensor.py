import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chem_emu import tensor as tn
from chem_emu.errors import ContractError, DimensionError, NumericError
from chem_emu.tensor import Tensor, grad_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# -- matmul ------------------------------------------------------------------


def test_matmul_identity(rng):
    m = rng.normal(size=(3, 3))
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(m)).data, m)


def test_matmul_hand_case():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_grad_of_sum_is_ones_times_bT(rng):
    a, b = leaf(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(4, 6)))
    (a @ b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((5, 6)) @ b.data.T, rtol=1e-12)
    assert grad_check(lambda x: (x @ b).sum(), a) < 1e-6


def test_matmul_batched_grads(rng):
    a = Tensor(rng.normal(size=(3, 5, 4)))
    b = Tensor(rng.normal(size=(2, 4, 3)))
    # shared 2-D weight on the right, then a batched left operand
    assert grad_check(lambda w: tn.sin(a @ w).sum(), Tensor(rng.normal(size=(4, 3)))) < 1e-6
    assert grad_check(lambda x: tn.sin(x @ b).sum(), Tensor(rng.normal(size=(2, 5, 4)))) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


# -- elementwise -------------------------------------------------------------


def test_sin_cos_of_zero():
    z = Tensor(np.zeros(4))
    np.testing.assert_array_equal(tn.elementwise("sin", z).data, np.zeros(4))
    np.testing.assert_array_equal(tn.elementwise("cos", z).data, np.ones(4))


def test_sin_derivative_closed_form():
    x = leaf(0.3)
    tn.sin(x).backward()
    assert x.grad == pytest.approx(math.cos(0.3), abs=1e-15)


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_binary_grad_check(op, rng):
    other = Tensor(rng.normal(size=8))
    assert grad_check(lambda x: tn.square(tn.elementwise(op, x, other)).sum(), Tensor(rng.normal(size=8))) < 1e-6


def test_mul_grad_both_operands(rng):
    a0, b0 = rng.normal(size=8), rng.normal(size=8)
    assert grad_check(lambda a: tn.mul(a, Tensor(b0)).sum(), Tensor(a0)) < 1e-6
    assert grad_check(lambda b: tn.mul(Tensor(a0), b).sum(), Tensor(b0)) < 1e-6


@pytest.mark.parametrize("op", ["sin", "cos", "square", "exp"])
def test_unary_grad_check(op, rng):
    assert grad_check(lambda x: tn.elementwise(op, x).sum(), Tensor(rng.normal(size=7))) < 1e-6


def test_scale_and_other_ops(rng):
    x0 = rng.normal(size=6)
    assert grad_check(lambda x: tn.elementwise("scale", x, 2.5).sum(), Tensor(x0)) < 1e-9
    assert grad_check(lambda x: tn.tanh(x).sum(), Tensor(x0)) < 1e-6
    assert grad_check(lambda x: tn.gelu(x).sum(), Tensor(x0)) < 1e-6
    assert grad_check(lambda x: tn.div(Tensor(x0), tn.exp(x)).sum(), Tensor(x0)) < 1e-6


def test_broadcast_grads_reduce_to_operand_shape(rng):
    a = leaf(rng.normal(size=(4, 3)))
    b = leaf(rng.normal(size=(3,)))
    (a * b).sum().backward()
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0))
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, (4, 3)))


def test_non_broadcastable_raises():
    with pytest.raises(DimensionError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


# -- reductions --------------------------------------------------------------


def test_sum_value():
    assert tn.reduce("sum", Tensor([1.0, 2.0, 3.0])).item() == 6.0


def test_mean_gradient_is_one_over_n():
    x = leaf(np.arange(5.0))
    tn.reduce("mean", x).backward()
    np.testing.assert_allclose(x.grad, np.full(5, 0.2))


def test_max_first_tie_rule():
    x = leaf([2.0, 5.0, 5.0])
    m = tn.reduce("max", x)
    assert m.item() == 5.0
    m.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_max_axis_grad(rng):
    x = leaf(rng.normal(size=(3, 4)))
    tn.reduce_max(x, axis=1).sum().backward()
    expect = np.zeros((3, 4))
    expect[np.arange(3), x.data.argmax(axis=1)] = 1.0
    np.testing.assert_array_equal(x.grad, expect)


def test_invalid_axis():
    with pytest.raises(DimensionError):
        tn.reduce("sum", Tensor(np.ones((2, 2))), axis=2)


# -- softmax -----------------------------------------------------------------


@pytest.mark.parametrize("c", [-50.0, 0.0, 3.0, 700.0])
def test_softmax_shift_invariance(c):
    np.testing.assert_allclose(tn.softmax(Tensor([c, c, c])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_closed_form():
    np.testing.assert_allclose(tn.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_jvp_matches_fd(rng):
    v = Tensor(rng.normal(size=6))
    assert grad_check(lambda x: (tn.softmax(x) * v).sum(), Tensor(rng.normal(size=6))) < 1e-6


def test_softmax_nan_rejected():
    with pytest.raises(NumericError):
        tn.softmax(Tensor([0.0, float("nan")]))


# -- backward ----------------------------------------------------------------


def test_backward_sum_gives_ones(rng):
    x = leaf(rng.normal(size=(3, 2)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_square_gives_2x(rng):
    x = leaf(rng.normal(size=5))
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-15)


def test_backward_accumulates_until_zero_grad(rng):
    x = leaf(rng.normal(size=3))
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 2.0))
    tn.zero_grad([x])
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        leaf(np.ones(3)).backward()


def test_unreachable_leaf_grad_stays_zero():
    x, y = leaf(np.ones(2)), leaf(np.ones(2))
    x.sum().backward()
    np.testing.assert_array_equal(y.grad, np.zeros(2))


def test_tape_is_topological(rng):
    x = leaf(rng.normal(size=3))
    loss = tn.sin(x * 2.0).sum()
    tape = tn.Tape(loss)
    pos = {}
    for i, (out, inputs) in enumerate(tape.ops):
        for p in inputs:
            if p in pos:
                assert pos[p] < i
        pos[out] = i


def test_no_grad_records_nothing():
    x = leaf(np.ones(2))
    with tn.no_grad():
        y = tn.sin(x)
    assert not y.requires_grad


def test_determinism(rng):
    def run():
        r = np.random.default_rng(7)
        a, b = leaf(r.normal(size=(6, 5))), Tensor(r.normal(size=(5, 4)))
        tn.softmax(a @ b, axis=-1).max(axis=1).sum().backward()
        return a.grad.copy()

    np.testing.assert_array_equal(run(), run())


# -- grad_check --------------------------------------------------------------


def test_grad_check_sum_sin(rng):
    assert grad_check(lambda x: tn.sin(x).sum(), Tensor(rng.normal(size=10)), h=1e-5) < 1e-6


def test_grad_check_linear_is_rounding_only(rng):
    w = Tensor(rng.uniform(0.5, 2.0, size=10))
    assert grad_check(lambda x: (x * w).sum(), Tensor(rng.normal(size=10))) < 1e-9


def test_grad_check_softmax_cross_entropy(rng):
    target = np.zeros((4, 5))
    target[np.arange(4), rng.integers(0, 5, size=4)] = 1.0

    def xent(x):
        return -(Tensor(target) * tn.log(tn.softmax(x, axis=-1))).sum()

    assert grad_check(xent, Tensor(rng.normal(size=(4, 5)))) < 1e-5


def test_grad_check_propagates_nan():
    assert math.isnan(grad_check(lambda x: (x * Tensor([float("nan")])).sum(), Tensor([1.0])))


# -- properties --------------------------------------------------------------

finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(tn.softmax(Tensor(x), axis=-1).data.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 4).flatmap(
        lambda n: st.tuples(
            arrays(np.float64, (3, n), elements=finite),
            arrays(np.float64, (n,), elements=finite),
        )
    )
)
def test_broadcast_add_matches_numpy(pair):
    a, b = pair
    np.testing.assert_array_equal((Tensor(a) + Tensor(b)).data, a + b)
    np.testing.assert_array_equal((Tensor(b) * Tensor(a)).data, b * a)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_composed_chain_rule(x):
    # backward equals the product of the local Jacobians: cos(x W) W^T
    w = np.linspace(-1, 1, 8).reshape(4, 2)
    t = Tensor(x, requires_grad=True)
    tn.sin(t @ Tensor(w)).sum().backward()
    np.testing.assert_allclose(t.grad, np.cos(x @ w) @ w.T, rtol=1e-13, atol=1e-14)
