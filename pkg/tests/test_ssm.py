"""State-space discretization, the three scan routes, and the fused kernel."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikeground import (ContinuousSSM, ConvKernel, DiscreteSSM, Tape, Tensor,
                         conv_scan, prefix_scan, recurrent_scan, selective_scan,
                         zoh_discretize)
from spikeground.errors import ContractError, DimensionError, DomainError
from spikeground.kernels import checkpoint_stride, scan_fwd, scan_fwd_ref


def _random_lti(rng, n):
    # negative real poles keep the recurrence stable over long horizons
    a = -rng.uniform(0.05, 2.0, size=n)
    b = rng.normal(size=n)
    c = rng.normal(size=n)
    return ContinuousSSM(a=a, b=b, c=c)


# ---------------------------------------------------------------------- ZOH


def test_zoh_closed_form_half():
    abar, bbar = zoh_discretize(np.array([-1.0]), np.array([1.0]), math.log(2.0))
    assert abs(abar[0] - 0.5) < 1e-12
    assert abs(bbar[0] - 0.5) < 1e-12


def test_zoh_matches_scalar_exponential():
    rng = np.random.default_rng(7)
    a = -rng.uniform(0.1, 3.0, size=12)
    b = rng.normal(size=12)
    delta = 0.37
    abar, bbar = zoh_discretize(a, b, delta)
    np.testing.assert_allclose(abar, np.exp(delta * a), rtol=1e-14)
    np.testing.assert_allclose(bbar, b * (np.exp(delta * a) - 1.0) / a, rtol=1e-13)


def test_zoh_zero_a_limit():
    abar, bbar = zoh_discretize(np.array([0.0]), np.array([2.0]), 0.25)
    assert abar[0] == 1.0
    assert bbar[0] == pytest.approx(0.5, abs=1e-15)  # delta * b


def test_zoh_tiny_a_no_cancellation():
    # expm1 keeps the ratio accurate however small a gets
    delta = 0.1
    for a in (1e-5, 1e-9, 1e-14, -1e-5, -1e-9, -1e-14):
        _, bbar = zoh_discretize(np.array([a]), np.array([1.0]), delta)
        exact = np.expm1(delta * a) / a
        assert bbar[0] == pytest.approx(exact, rel=1e-14)
        assert bbar[0] == pytest.approx(delta, rel=1e-4)


def test_zoh_rejects_nonpositive_delta():
    with pytest.raises(DomainError):
        zoh_discretize(np.array([-1.0]), np.array([1.0]), 0.0)
    with pytest.raises(DomainError):
        zoh_discretize(np.array([-1.0]), np.array([1.0]), -0.5)


# ------------------------------------------------------- recurrent vs conv


def test_scan_conv_equivalence_sweep():
    """Same LTI system run as a recurrence and as an FIR convolution."""
    rng = np.random.default_rng(42)
    for trial in range(100):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(4, 65))
        sys = _random_lti(rng, n)
        delta = float(rng.uniform(0.01, 0.5))
        disc = DiscreteSSM.from_lti(sys, delta, m)
        kernel = ConvKernel.from_lti(sys, delta, m)
        x = rng.normal(size=m)
        y_rec = recurrent_scan(disc, x)
        y_conv = conv_scan(kernel, x)
        assert np.abs(y_rec - y_conv).max() < 1e-6, f"trial {trial}"


def test_conv_kernel_is_impulse_response():
    rng = np.random.default_rng(3)
    sys = _random_lti(rng, 4)
    disc = DiscreteSSM.from_lti(sys, 0.2, 16)
    kernel = ConvKernel.from_lti(sys, 0.2, 16)
    impulse = np.zeros(16)
    impulse[0] = 1.0
    np.testing.assert_allclose(kernel.weights, recurrent_scan(disc, impulse), rtol=1e-12)


def test_conv_kernel_rejects_varying_system():
    rng = np.random.default_rng(5)
    abar = rng.uniform(0.1, 0.9, size=(6, 3))
    bbar = rng.normal(size=(6, 3))
    c = rng.normal(size=(6, 3))
    c[3] += 1.0  # break time-invariance
    delta = np.full(6, 0.1)
    with pytest.raises(ContractError):
        ConvKernel.from_discrete(DiscreteSSM(abar=abar, bbar=bbar, c=c, delta=delta))


# -------------------------------------------------------------- prefix scan


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50))
def test_prefix_scan_matches_sequential(m):
    rng = np.random.default_rng(m)
    coeff_a = rng.uniform(-0.95, 0.95, size=m)
    coeff_b = rng.normal(size=m)
    got = prefix_scan(coeff_a, coeff_b)
    h = 0.0
    want = np.empty(m)
    for i in range(m):
        h = coeff_a[i] * h + coeff_b[i]
        want[i] = h
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_prefix_scan_long_horizon_stable():
    m = 10_000
    rng = np.random.default_rng(0)
    coeff_a = rng.uniform(0.0, 0.999, size=m)
    coeff_b = rng.normal(size=m)
    out = prefix_scan(coeff_a, coeff_b)
    assert np.isfinite(out).all()
    h = 0.0
    for i in range(m):
        h = coeff_a[i] * h + coeff_b[i]
    assert out[-1] == pytest.approx(h, rel=1e-8)


# ---------------------------------------------------------- selective scan


def test_fused_kernel_matches_reference():
    rng = np.random.default_rng(11)
    for _ in range(20):
        nb = int(rng.integers(1, 4))
        m = int(rng.integers(2, 40))
        e = int(rng.integers(1, 6))
        n = int(rng.integers(1, 6))
        x = rng.normal(size=(nb, m, e))
        delta = rng.uniform(1e-3, 0.4, size=(nb, m, e))
        bm = rng.normal(size=(nb, m, n))
        cm = rng.normal(size=(nb, m, n))
        a = -np.exp(rng.normal(size=n))
        y = np.zeros((nb, m, e))
        cp = checkpoint_stride(m)
        ckpt = np.empty(((m + cp - 1) // cp, nb, e, n))
        scan_fwd(x, delta, bm, cm, a, y, ckpt, cp)
        y_ref, _ = scan_fwd_ref(x, delta, bm, cm, a)
        np.testing.assert_allclose(y, y_ref, rtol=1e-10, atol=1e-12)


def test_selective_scan_gradients_vs_fd():
    from gradcheck import check_op

    rng = np.random.default_rng(21)
    shapes = dict(nb=2, m=7, e=3, n=2)
    x = rng.normal(size=(2, 7, 3))
    delta = rng.uniform(0.05, 0.3, size=(2, 7, 3))
    bm = rng.normal(size=(2, 7, 2))
    cm = rng.normal(size=(2, 7, 2))
    a = -np.exp(rng.normal(size=2))
    check_op(selective_scan, [x, delta, bm, cm, a], rng)


def test_selective_scan_checkpoint_boundaries():
    # lengths around the sqrt stride edges exercise segment replay
    rng = np.random.default_rng(9)
    for m in (1, 2, 3, 4, 5, 9, 16, 17, 25, 26):
        x = rng.normal(size=(1, m, 2))
        delta = rng.uniform(0.05, 0.3, size=(1, m, 2))
        bm = rng.normal(size=(1, m, 3))
        cm = rng.normal(size=(1, m, 3))
        a = -np.exp(rng.normal(size=3))
        with Tape() as tape:
            xt = Tensor(x, requires_grad=True)
            y = selective_scan(xt, Tensor(delta), Tensor(bm), Tensor(cm), Tensor(a))
            tape.backward(y.sum())
        assert np.isfinite(xt.grad).all()
        y_ref, _ = scan_fwd_ref(x, delta, bm, cm, a)
        np.testing.assert_allclose(y.data, y_ref, rtol=1e-10, atol=1e-12)


def test_selective_scan_unbatched_squeeze():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(6, 2))
    delta = rng.uniform(0.05, 0.3, size=(6, 2))
    bm = rng.normal(size=(6, 3))
    cm = rng.normal(size=(6, 3))
    a = -np.exp(rng.normal(size=3))
    out = selective_scan(Tensor(x), Tensor(delta), Tensor(bm), Tensor(cm), Tensor(a))
    assert out.data.shape == (6, 2)
    batched = selective_scan(Tensor(x[None]), Tensor(delta[None]), Tensor(bm[None]),
                             Tensor(cm[None]), Tensor(a))
    np.testing.assert_array_equal(out.data, batched.data[0])


def test_selective_scan_rejects_bad_delta():
    x = np.zeros((1, 4, 2))
    ok = np.full((1, 4, 2), 0.1)
    bad = ok.copy()
    bad[0, 2, 1] = 0.0
    bm = np.zeros((1, 4, 3))
    a = -np.ones(3)
    with pytest.raises(DomainError):
        selective_scan(Tensor(x), Tensor(bad), Tensor(bm), Tensor(bm), Tensor(a))


def test_selective_scan_shape_mismatch():
    x = np.zeros((1, 4, 2))
    delta = np.full((1, 4, 2), 0.1)
    bm = np.zeros((1, 5, 3))  # wrong M
    a = -np.ones(3)
    with pytest.raises(DimensionError):
        selective_scan(Tensor(x), Tensor(delta), Tensor(bm), Tensor(bm[:, :4]), Tensor(a))
        selective_scan(Tensor(x), Tensor(delta), Tensor(bm), Tensor(bm), Tensor(a))


def test_long_sequence_state_stays_bounded():
    # decaying A keeps the hidden state and output finite over 10k steps
    rng = np.random.default_rng(17)
    m = 10_000
    x = rng.normal(size=(1, m, 1))
    delta = np.full((1, m, 1), 0.05)
    bm = rng.normal(size=(1, m, 2))
    cm = rng.normal(size=(1, m, 2))
    a = np.array([-0.5, -1.5])
    out = selective_scan(Tensor(x), Tensor(delta), Tensor(bm), Tensor(cm), Tensor(a))
    assert np.isfinite(out.data).all()
    assert np.abs(out.data).max() < 1e3
