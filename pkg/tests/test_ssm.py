import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isoscan.layers import softplus
from isoscan.ssm import (NonFiniteActivation, combine, conv_apply, discretize_zoh, init_ssm_params,
                         linear_scan, lti_kernel, lti_scan, selective_scan, selective_scan_backward,
                         selective_scan_forward, selective_scan_parallel)


def test_zoh_closed_form():
    Abar, Bbar = discretize_zoh(math.log(2.0), 1.0, 1.0)
    assert Abar == pytest.approx(2.0, abs=1e-12)
    assert Bbar == pytest.approx(1 / math.log(2.0), abs=1e-12)


def test_zoh_limits():
    Abar, Bbar = discretize_zoh(0.0, 3.0, 0.5)
    assert Abar == 1.0 and Bbar == pytest.approx(1.5, abs=1e-15)
    Abar, Bbar = discretize_zoh(-1.0, 1.0, 1e-12)
    assert Abar == pytest.approx(1.0, abs=1e-11) and abs(Bbar) < 1e-11
    with pytest.raises(ValueError):
        discretize_zoh(-1.0, 1.0, 0.0)


def test_lti_hand_unrolled():
    np.testing.assert_allclose(lti_scan(0.5, 1.0, 1.0, [1, 1, 1]), [1, 1.5, 1.75], atol=1e-15)
    assert np.all(lti_scan([0.3, 0.2], [1, 2], [1, 1], np.zeros(5)) == 0)
    x = np.arange(4.0)
    np.testing.assert_allclose(lti_scan(0.0, 2.0, 3.0, x), 6 * x)


def test_lti_kernel_values():
    np.testing.assert_allclose(lti_kernel(0.5, 1.0, 1.0, 3), [1, 0.5, 0.25])
    assert np.all(lti_kernel([0.5, 0.1], [1, 1], [0, 0], 4) == 0)
    with pytest.raises(ValueError):
        lti_kernel(0.5, 1.0, 1.0, 0)


def test_lti_shape_mismatch():
    with pytest.raises(ValueError):
        lti_scan([0.5, 0.5], [1.0], [1.0, 1.0], [1.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_scan_conv_duality(seed):
    rng = np.random.default_rng(seed)
    n, L = int(rng.integers(1, 6)), int(rng.integers(1, 30))
    Abar, Bbar = discretize_zoh(-rng.uniform(0.05, 3, n), rng.standard_normal(n), rng.uniform(0.01, 1))
    C, x = rng.standard_normal(n), rng.standard_normal(L)
    y_scan = lti_scan(Abar, Bbar, C, x)
    y_conv = conv_apply(x, lti_kernel(Abar, Bbar, C, L))
    assert np.max(np.abs(y_scan - y_conv)) < 1e-10


def test_combine_associative():
    rng = np.random.default_rng(3)
    e1, e2, e3 = [(rng.standard_normal(4), rng.standard_normal(4)) for _ in range(3)]
    lhs = combine(combine(e3, e2), e1)
    rhs = combine(e3, combine(e2, e1))
    for u, v in zip(lhs, rhs):
        assert np.max(np.abs(u - v)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 50), st.integers(0, 10 ** 6))
def test_linear_scan_matches_loop(L, block, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (L, 2)), rng.standard_normal((L, 2))
    h, ref = np.zeros(2), []
    for t in range(L):
        h = a[t] * h + b[t]
        ref.append(h)
    assert np.max(np.abs(linear_scan(a, b, block) - np.array(ref))) < 1e-12


def _params(rng, c=2, n=3):
    return init_ssm_params(c, n, rng)


def test_constant_input_is_lti():
    rng = np.random.default_rng(0)
    p = _params(rng)
    xbar = rng.standard_normal(2)
    y = selective_scan(np.tile(xbar, (7, 1)), p)
    delta = softplus(p["w_delta"] @ xbar + p["delta_bias"])
    B, C, A = p["w_B"] @ xbar, p["w_C"] @ xbar, -np.exp(p["log_a"])
    for c in range(2):
        Abar, Bbar = discretize_zoh(A[c], B, delta[c])
        ref = lti_scan(Abar, Bbar, C, np.full(7, xbar[c]))
        assert np.max(np.abs(y[:, c] - ref)) < 1e-10


def test_single_step():
    rng = np.random.default_rng(1)
    p = _params(rng)
    x = rng.standard_normal((1, 2))
    delta = softplus(p["w_delta"] @ x[0] + p["delta_bias"])
    B, C, A = p["w_B"] @ x[0], p["w_C"] @ x[0], -np.exp(p["log_a"])
    for c in range(2):
        _, Bbar = discretize_zoh(A[c], B, delta[c])
        assert selective_scan(x, p)[0, c] == pytest.approx(C @ Bbar * x[0, c], abs=1e-14)


def test_null_readout():
    rng = np.random.default_rng(2)
    p = _params(rng)
    for k in ("w_delta", "w_B", "w_C"):
        p[k] = np.zeros_like(p[k])
    p["delta_bias"] = np.full(2, 0.3)
    assert np.all(selective_scan(rng.standard_normal((5, 2)), p) == 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 64), st.integers(0, 10 ** 6))
def test_parallel_equals_sequential(L, seed):
    rng = np.random.default_rng(seed)
    p = _params(rng, c=3, n=4)
    x = rng.standard_normal((L, 3))
    ref = selective_scan(x, p)
    for block in (1, 3, 8, L, None):
        assert np.max(np.abs(selective_scan_parallel(x, p, block) - ref)) < 1e-9


def test_length64_block8():
    rng = np.random.default_rng(5)
    p = _params(rng, c=4, n=8)
    x = rng.standard_normal((64, 4))
    assert np.max(np.abs(selective_scan_parallel(x, p, 8) - selective_scan(x, p))) < 1e-9


def test_stability_bound():
    rng = np.random.default_rng(6)
    for _ in range(10):
        p = _params(rng, c=2, n=4)
        x = rng.uniform(-1, 1, (40, 2))
        _, s = selective_scan_forward(x, p)
        drive = np.max(np.abs(s["phi"] * s["Bt"][:, None, :] * x[:, :, None]))
        assert np.all(np.abs(s["Abar"]) < 1)
        assert np.max(np.abs(s["H"])) <= drive / (1 - np.max(np.abs(s["Abar"]))) + 1e-12


def test_zero_cotangent():
    rng = np.random.default_rng(7)
    p = _params(rng)
    _, s = selective_scan_forward(rng.standard_normal((6, 2)), p)
    dx, grads = selective_scan_backward(s, np.zeros((6, 2)))
    assert np.all(dx == 0) and all(np.all(g == 0) for g in grads.values())


def test_backward_needs_saved_state():
    with pytest.raises(ValueError):
        selective_scan_backward(None, np.zeros((2, 2)))


def test_reverse_recurrence_matches_conv_adjoint():
    # the backward pass carries state cotangents with a reverse-time scan; for an LTI
    # system that must equal correlating dy with the convolution kernel
    rng = np.random.default_rng(8)
    n, L = 3, 12
    Abar, Bbar = discretize_zoh(-rng.uniform(0.1, 2, n), rng.standard_normal(n), 0.4)
    C = rng.standard_normal(n)
    K = lti_kernel(Abar, Bbar, C, L)
    dy = rng.standard_normal(L)
    dx_conv = np.array([sum(K[j - t] * dy[j] for j in range(t, L)) for t in range(L)])
    e = dy[:, None] * C[None, :]
    g = linear_scan(np.tile(Abar, (L, 1))[::-1], e[::-1])[::-1]
    dx_scan = g @ Bbar
    assert np.max(np.abs(dx_conv - dx_scan)) < 1e-10


def test_nonfinite_names_step():
    rng = np.random.default_rng(9)
    p = _params(rng)
    x = rng.standard_normal((5, 2))
    x[3, 0] = np.inf
    with pytest.raises(NonFiniteActivation) as ei:
        selective_scan(x, p)
    assert ei.value.step == 3
    with pytest.raises(NonFiniteActivation) as ei:
        selective_scan_parallel(x, p)
    assert ei.value.step == 3


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        selective_scan(np.zeros((0, 2)), _params(np.random.default_rng(0)))
