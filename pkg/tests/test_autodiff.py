"""Tape mechanics and per-op gradient correctness."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import spikeground.autodiff as ad
from spikeground import Tape, Tensor, no_grad
from spikeground.errors import ContractError, DimensionError, NumericalError

from gradcheck import check_op


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------- tape semantics


def test_backward_seeds_scalar_with_one(rng):
    with Tape() as tape:
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        loss = x.sum()
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_backward_rejects_non_scalar_loss():
    with Tape() as tape:
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
        with pytest.raises(ContractError):
            tape.backward(y)


def test_params_not_in_graph_get_zero_grad():
    with Tape() as tape:
        used = Tensor(np.ones(2), requires_grad=True)
        unused = Tensor(np.ones(4), requires_grad=True)
        tape.backward((used * 3.0).sum(), params=[used, unused])
    np.testing.assert_array_equal(used.grad, [3.0, 3.0])
    np.testing.assert_array_equal(unused.grad, np.zeros(4))


def test_no_grad_suppresses_recording():
    with Tape() as tape:
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 5.0
        assert len(tape._nodes) == 0
        z = x * 2.0
        tape.backward(z.sum())
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    assert y.grad is None


def test_grad_accumulates_across_uses(rng):
    with Tape() as tape:
        x = Tensor(np.array([1.5]), requires_grad=True)
        loss = (x * 2.0 + x * 3.0).sum()
        tape.backward(loss)
    assert x.grad[0] == pytest.approx(5.0)


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_debug_nan_raises_at_bad_op():
    ad.set_debug_nan(True)
    try:
        with Tape():
            x = Tensor(np.array([-1.0]), requires_grad=True)
            with pytest.raises(NumericalError):
                ad.log(x)
    finally:
        ad.set_debug_nan(False)


def test_ops_outside_tape_do_not_leak():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0  # no active tape: plain value, no parents
    assert y._parents == ()
    np.testing.assert_array_equal(y.data, [2.0, 2.0, 2.0])


# --------------------------------------------------------- elementwise grads


def test_add_mul_broadcast_grads(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    check_op(lambda x, y: x + y, [a, b], rng)
    check_op(lambda x, y: x * y, [a, b], rng)
    check_op(lambda x, y: x - y, [a, b], rng)


def test_div_and_pow_grads(rng):
    a = rng.normal(size=(5,))
    b = rng.uniform(0.5, 2.0, size=(5,))
    check_op(lambda x, y: x / y, [a, b], rng)
    check_op(lambda x: x ** 3, [a], rng)
    check_op(lambda x: x ** 2, [a], rng)


def test_unary_smooth_ops(rng):
    x = rng.normal(size=(6,))
    pos = rng.uniform(0.5, 3.0, size=(6,))
    check_op(ad.exp, [x], rng)
    check_op(ad.log, [pos], rng)
    check_op(ad.sqrt, [pos], rng)
    check_op(ad.sigmoid, [x], rng)
    check_op(ad.silu, [x], rng)
    check_op(ad.softplus, [x], rng)


def test_absolute_away_from_zero(rng):
    x = rng.uniform(0.2, 2.0, size=(8,)) * rng.choice([-1.0, 1.0], size=8)
    check_op(ad.absolute, [x], rng)


def test_where_routes_gradient(rng):
    cond = rng.random(size=(7,)) > 0.5
    a = rng.normal(size=(7,))
    b = rng.normal(size=(7,))
    check_op(lambda x, y: ad.where(cond, x, y), [a, b], rng)
    out = ad.where(cond, Tensor(a), Tensor(b))
    np.testing.assert_array_equal(out.data, np.where(cond, a, b))


def test_clip_zero_grad_outside(rng):
    x = np.array([-2.0, -0.3, 0.4, 1.9])
    with Tape() as tape:
        t = Tensor(x, requires_grad=True)
        tape.backward(ad.clip(t, -1.0, 1.0).sum())
    np.testing.assert_array_equal(t.grad, [0.0, 1.0, 1.0, 0.0])
    # interior points only: the kink breaks central differences
    check_op(lambda t: ad.clip(t, -1.0, 1.0), [np.array([-0.5, 0.1, 0.7])], rng)


def test_smooth_l1_grads_and_values(rng):
    x = np.array([-2.0, -0.5, 0.5, 2.0])
    out = ad.smooth_l1(Tensor(x))
    np.testing.assert_allclose(out.data, [1.5, 0.125, 0.125, 1.5])
    check_op(ad.smooth_l1, [rng.normal(size=(9,)) * 1.7], rng)


# --------------------------------------------------------- reductions, shape


def test_reduction_grads(rng):
    x = rng.normal(size=(3, 5))
    check_op(lambda t: ad.sum_(t), [x], rng)
    check_op(lambda t: ad.sum_(t, axis=0), [x], rng)
    check_op(lambda t: ad.mean(t, axis=1, keepdims=True), [x], rng)
    check_op(lambda t: ad.logsumexp(t, axis=-1), [x], rng)
    check_op(lambda t: ad.logsumexp(t, axis=0, keepdims=True), [x], rng)


def test_logsumexp_matches_scipy(rng):
    from scipy.special import logsumexp as sp_lse

    x = rng.normal(size=(4, 6)) * 10
    out = ad.logsumexp(Tensor(x), axis=1)
    np.testing.assert_allclose(out.data, sp_lse(x, axis=1), rtol=1e-12)


def test_logsumexp_overflow_safe():
    x = Tensor(np.array([1000.0, 1000.0]))
    out = ad.logsumexp(x, axis=0)
    assert np.isfinite(out.data).all()
    assert out.data == pytest.approx(1000.0 + np.log(2.0))


def test_shape_op_grads(rng):
    x = rng.normal(size=(2, 6))
    check_op(lambda t: ad.reshape(t, (3, 4)), [x], rng)
    check_op(lambda t: ad.transpose(t, (1, 0)), [x], rng)
    check_op(lambda t: ad.pad_end(t, 3, axis=1), [x], rng)
    check_op(lambda t: t[0], [x], rng)
    check_op(lambda t: t[:, 2:5], [x], rng)


def test_take_fancy_index_accumulates(rng):
    # repeated indices must sum their gradients, not overwrite
    x = np.zeros(4)
    idx = np.array([1, 1, 3])
    with Tape() as tape:
        t = Tensor(x, requires_grad=True)
        tape.backward(ad.take(t, idx).sum())
    np.testing.assert_array_equal(t.grad, [0.0, 2.0, 0.0, 1.0])
    check_op(lambda t: ad.take(t, idx), [rng.normal(size=4)], rng)


def test_concat_stack_grads(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(4, 3))
    check_op(lambda x, y: ad.concat([x, y], axis=0), [a, b], rng)
    c = rng.normal(size=(2, 3))
    check_op(lambda x, y: ad.stack([x, y], axis=1), [a, c], rng)


# ------------------------------------------------------------- linear algebra


def test_matmul_grads(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    check_op(lambda x, y: x @ y, [a, b], rng)
    # batched with broadcast on the left operand
    ab = rng.normal(size=(5, 3, 4))
    check_op(lambda x, y: x @ y, [ab, b], rng)


def test_linear_grads(rng):
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 5))
    b = rng.normal(size=(5,))
    check_op(ad.linear, [x, w, b], rng)
    check_op(lambda t, u: ad.linear(t, u), [x, w], rng)


def test_conv1d_causal_and_grads(rng):
    x = rng.normal(size=(2, 6, 3))
    k = rng.normal(size=(3, 3))
    check_op(ad.conv1d, [x, k], rng)
    # causality: output at position m ignores positions > m
    out = ad.conv1d(Tensor(x), Tensor(k)).data
    x2 = x.copy()
    x2[:, 4:, :] = 99.0
    out2 = ad.conv1d(Tensor(x2), Tensor(k)).data
    np.testing.assert_allclose(out[:, :4], out2[:, :4])


def test_conv1d_kernel_longer_than_sequence():
    with pytest.raises(DimensionError):
        ad.conv1d(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((4, 3))))


def test_rmsnorm_and_l2_grads(rng):
    x = rng.normal(size=(3, 5))
    g = rng.uniform(0.5, 1.5, size=(5,))
    check_op(ad.rmsnorm, [x, g], rng)
    check_op(ad.l2_normalize, [x], rng)
    out = ad.l2_normalize(Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, rtol=1e-9)


# --------------------------------------------------------------- spike paths


def _surrogate_oracle(u, threshold, window, gout):
    """Independent scalar chain rule for the rectangular surrogate."""
    g = np.zeros_like(u)
    flat_u, flat_g, flat_o = u.ravel(), g.ravel(), gout.ravel()
    for i in range(flat_u.size):
        sur = 1.0 / (2.0 * window) if abs(flat_u[i] - threshold) < window else 0.0
        flat_g[i] = flat_o[i] * sur
    return g


def test_heaviside_ste_surrogate(rng):
    # sample away from the window boundary where the surrogate jumps
    u = rng.uniform(-2.0, 3.0, size=(40,))
    u = u[np.abs(np.abs(u - 1.0) - 0.5) > 0.05]
    w = rng.normal(size=u.shape)
    with Tape() as tape:
        t = Tensor(u, requires_grad=True)
        s = ad.heaviside_ste(t, threshold=1.0, window=0.5)
        tape.backward((s * Tensor(w)).sum())
    np.testing.assert_array_equal(s.data, (u >= 1.0).astype(float))
    np.testing.assert_allclose(t.grad, _surrogate_oracle(u, 1.0, 0.5, w), rtol=1e-12)


# ----------------------------------------------------------------- properties


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_silu_identity(vals):
    x = np.array(vals)
    out = ad.silu(Tensor(x)).data
    np.testing.assert_allclose(out, x / (1.0 + np.exp(-np.clip(x, -500, 500))),
                               rtol=1e-10, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5))
def test_unbroadcast_inverts_broadcast(rows, cols):
    g = np.ones((rows, cols))
    assert ad._unbroadcast(g, (cols,)).tolist() == [float(rows)] * cols
    assert ad._unbroadcast(g, (1, cols)).shape == (1, cols)
