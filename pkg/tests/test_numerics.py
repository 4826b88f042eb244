import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import central_diff, elementwise_rel_err
from ufans.numerics import (
    AdamState,
    NonFiniteError,
    ShapeError,
    Tensor,
    adam_step,
    add,
    backward,
    matmul,
    mse_loss,
    mul,
    parameter,
    recording,
    sigmoid,
    tanh,
    tensor,
)

F64 = np.float64


def grad_of(fn, *params):
    with recording() as tape:
        loss = fn()
    g = backward(tape, loss)
    return [g[p] for p in params]


# -- elementwise ops -------------------------------------------------------


def test_add_elementwise():
    np.testing.assert_array_equal(add(tensor([1, 2]), tensor([3, 4])).data, [4, 6])


def test_mul_zero_annihilates():
    x = tensor(np.random.default_rng(0).standard_normal((3, 4)))
    np.testing.assert_array_equal(mul(x, tensor(np.zeros((3, 4)))).data, np.zeros((3, 4)))


def test_add_channel_bias_broadcast():
    out = add(tensor([[1, 2], [3, 4]]), tensor([10, 20]), axis=-1)
    np.testing.assert_array_equal(out.data, [[11, 22], [13, 24]])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        add(tensor(np.zeros((2, 3))), tensor(np.zeros(4)))


def test_matmul_examples():
    a = tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(matmul(tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal(matmul(tensor([[1, 2]]), tensor([[3], [4]])).data, [[11]])
    np.testing.assert_array_equal(matmul(tensor(np.zeros((3, 2))), a).data, np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((2, 3))))


def test_tanh_sigmoid_values():
    assert tanh(tensor([0.0])).data[0] == 0.0
    assert sigmoid(tensor([0.0])).data[0] == 0.5
    # reference values from math at double precision
    assert math.isclose(math.tanh(0.5), 0.46212, abs_tol=5e-6)
    assert math.isclose(1 / (1 + math.exp(-0.5)), 0.62246, abs_tol=5e-6)
    np.testing.assert_allclose(tanh(tensor([0.5], F64)).data, [0.46211715726000974], rtol=1e-15)
    np.testing.assert_allclose(sigmoid(tensor([0.5], F64)).data, [0.6224593312018546], rtol=1e-15)


@given(arrays(F64, st.integers(1, 20), elements=st.floats(-30, 30)))
def test_sigmoid_symmetry(x):
    np.testing.assert_allclose(sigmoid(tensor(-x, F64)).data, 1 - sigmoid(tensor(x, F64)).data, atol=1e-15)


def test_sigmoid_saturates_without_overflow():
    y = sigmoid(tensor([-1000.0, 1000.0], F64)).data
    np.testing.assert_array_equal(y, [0.0, 1.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_fails_fast():
    with pytest.raises(NonFiniteError):
        mul(tensor([np.inf], F64), tensor([0.0], F64))


# -- gradients vs finite differences ------------------------------------------


OPS = {
    "add": lambda a, b: add(a, b),
    "mul": lambda a, b: mul(a, b),
    "matmul": lambda a, b: matmul(a, b),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_binary_op_gradients(name):
    rng = np.random.default_rng(1)
    a = parameter(rng.standard_normal((3, 3)))
    b = parameter(rng.standard_normal((3, 3)))
    target = rng.standard_normal((3, 3))

    def loss():
        return mse_loss(OPS[name](a, b), target)

    ga, gb = grad_of(loss, a, b)
    assert elementwise_rel_err(ga, central_diff(lambda: loss().data, a.data)) < 1e-4
    assert elementwise_rel_err(gb, central_diff(lambda: loss().data, b.data)) < 1e-4


@pytest.mark.parametrize("op", [tanh, sigmoid])
def test_unary_gradients(op):
    rng = np.random.default_rng(2)
    x = parameter(rng.standard_normal((4, 5)))
    target = rng.standard_normal((4, 5))

    def loss():
        return mse_loss(op(x), target)

    (g,) = grad_of(loss, x)
    assert elementwise_rel_err(g, central_diff(lambda: loss().data, x.data)) < 1e-4


def test_bias_broadcast_gradient():
    rng = np.random.default_rng(3)
    x = parameter(rng.standard_normal((2, 3, 5)))
    b = parameter(rng.standard_normal(3))
    target = rng.standard_normal((2, 3, 5))

    def loss():
        return mse_loss(mul(add(x, b, axis=-2), b, axis=-2), target)

    gx, gb = grad_of(loss, x, b)
    assert elementwise_rel_err(gb, central_diff(lambda: loss().data, b.data)) < 1e-4
    assert elementwise_rel_err(gx, central_diff(lambda: loss().data, x.data)) < 1e-4


# -- loss ------------------------------------------------------------------


def test_mse_examples():
    x = tensor([1.0, 2.0, 3.0])
    assert mse_loss(x, x.data).item() == 0.0
    assert mse_loss(tensor([1.0, 1.0]), np.array([0.0, 2.0])).item() == 1.0
    with pytest.raises(ShapeError):
        mse_loss(tensor([1.0, 2.0]), np.zeros(3))


grid = st.integers(-800, 800).map(lambda v: v / 8)


@given(arrays(F64, (4, 3), elements=grid), arrays(F64, (4, 3), elements=grid))
def test_mse_nonnegative_and_homogeneous(p, t):
    base = mse_loss(tensor(p, F64), t).item()
    assert base >= 0
    assert (base == 0) == bool(np.array_equal(p, t))
    doubled = mse_loss(tensor(t + 2 * (p - t), F64), t).item()
    assert math.isclose(doubled, 4 * base, rel_tol=1e-9, abs_tol=1e-12)


def test_mse_gradient_closed_form():
    rng = np.random.default_rng(4)
    x = parameter(rng.standard_normal((3, 4)))
    c = rng.standard_normal((3, 4))
    (g,) = grad_of(lambda: mse_loss(x, c), x)
    np.testing.assert_allclose(g, 2 * (x.data - c) / x.data.size, rtol=1e-12)


# -- tape ------------------------------------------------------------------


def test_backward_rejects_non_scalar():
    x = parameter(np.ones(3))
    with recording() as tape:
        y = tanh(x)
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_disconnected_parameter_gets_zero_gradient():
    x = parameter(np.ones(3))
    unused = parameter(np.ones((2, 2)))
    with recording() as tape:
        loss = mse_loss(tanh(x), np.zeros(3))
    g = backward(tape, loss)
    np.testing.assert_array_equal(g[unused], np.zeros((2, 2)))
    assert unused not in g


def test_non_parameter_leaves_skipped():
    x = parameter(np.ones(3))
    const = Tensor(np.full(3, 2.0))
    with recording() as tape:
        loss = mse_loss(mul(x, const), np.zeros(3))
    g = backward(tape, loss)
    assert const not in g
    assert x in g


@pytest.mark.parametrize("k", [1, 5, 40])
def test_chain_visits_each_node_once(k):
    x = parameter(np.full(4, 0.1))
    with recording() as tape:
        y = x
        for _ in range(k):
            y = tanh(y)
        loss = mse_loss(y, np.zeros(4))
    assert len(tape) == k + 1
    ids = [e.output.id for e in tape.entries]
    for e in tape.entries:  # inputs precede consumers
        for inp in e.inputs:
            assert not tape.tracks(inp) or inp.requires_grad or ids.index(inp.id) < ids.index(e.output.id)
    assert backward(tape, loss).visited == len(tape)


def test_shared_subexpression_accumulates():
    x = parameter(np.array([0.3, -0.7]))
    with recording() as tape:
        t = tanh(x)
        loss = mse_loss(mul(t, t), np.zeros(2))
    g = backward(tape, loss)[x]
    fd = central_diff(lambda: np.mean(np.tanh(x.data) ** 4), x.data)
    assert elementwise_rel_err(g, fd) < 1e-6


# -- Adam ------------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    p = [np.linspace(-1, 1, 6)]
    g = [np.full(6, 3.7)]
    new, state = adam_step(p, g, AdamState.zeros_like(p))
    np.testing.assert_allclose(new[0] - p[0], -4e-4, rtol=1e-6)
    new, _ = adam_step(p, [-g[0]], AdamState.zeros_like(p))
    np.testing.assert_allclose(new[0] - p[0], 4e-4, rtol=1e-6)
    assert state.t == 1


def test_adam_zero_grad_leaves_params():
    p = [np.arange(5.0)]
    new, _ = adam_step(p, [np.zeros(5)], AdamState.zeros_like(p))
    np.testing.assert_array_equal(new[0], p[0])


def test_adam_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        p = [rng.standard_normal((3, 4)).astype(np.float32), rng.standard_normal(4).astype(np.float32)]
        state = AdamState.zeros_like(p)
        for _ in range(20):
            grads = [rng.standard_normal(a.shape).astype(np.float32) for a in p]
            p, state = adam_step(p, grads, state)
        return p, state

    (p1, s1), (p2, s2) = run(), run()
    for a, b in zip(p1 + list(s1.m) + list(s1.v), p2 + list(s2.m) + list(s2.v)):
        assert a.tobytes() == b.tobytes()
    assert s1.t == 20


def test_adam_is_pure():
    p = [np.ones(3)]
    g = [np.full(3, 0.5)]
    state = AdamState.zeros_like(p)
    a, sa = adam_step(p, g, state)
    b, sb = adam_step(p, g, state)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(p[0], np.ones(3))
    assert state.t == 0 and sa.t == sb.t == 1


def test_adam_rejects_nonfinite_before_mutation():
    p = [np.ones(3)]
    with pytest.raises(NonFiniteError):
        adam_step(p, [np.array([1.0, np.nan, 0.0])], AdamState.zeros_like(p))
    np.testing.assert_array_equal(p[0], np.ones(3))


def test_adam_shape_check():
    with pytest.raises(ShapeError):
        adam_step([np.ones(3)], [np.ones(4)], AdamState.zeros_like([np.ones(3)]))


def test_adam_defaults():
    s = AdamState.zeros_like([np.ones(1)])
    assert (s.lr, s.beta1, s.beta2, s.eps) == (4e-4, 0.9, 0.999, 1e-8)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_adam_reduces_quadratic(seed):
    rng = np.random.default_rng(seed)
    target = rng.standard_normal(5)
    p = [np.zeros(5)]
    state = AdamState.zeros_like(p, lr=0.05)
    start = np.sum((p[0] - target) ** 2)
    for _ in range(200):
        p, state = adam_step(p, [2 * (p[0] - target)], state)
    assert np.sum((p[0] - target) ** 2) < start
