import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hiclass_mil.numerics import (
    finite_diff_grad,
    jsd,
    jsd_softmax,
    kl_div,
    kl_softmax,
    log_softmax,
    relative_error,
    softmax,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def random_dist(rng, n):
    p = rng.random(n) + 1e-3
    return p / p.sum()


def test_softmax_symmetric():
    np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])


def test_softmax_large_values():
    np.testing.assert_allclose(softmax([1000.0, 1000.0, 1000.0]), [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_against_extended_precision():
    mpmath.mp.dps = 40
    es = [mpmath.exp(v) for v in (1, 2, 3)]
    ref = [float(e / sum(es)) for e in es]
    np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), ref, rtol=0, atol=1e-12)


def test_softmax_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        softmax([])
    with pytest.raises(ValueError):
        softmax([1.0, np.nan])


@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_shift_invariance(v, c):
    p = softmax(v)
    assert abs(p.sum() - 1) < 1e-12
    assert np.all(p > 0) and np.all(p <= 1)
    np.testing.assert_allclose(softmax(v + c), p, rtol=0, atol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(v)), p, rtol=0, atol=1e-12)


def test_kl_identity_and_analytic():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_div(p, p) == 0.0
    assert kl_div([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)


def test_kl_direct_summation(rng):
    p, q = random_dist(rng, 5), random_dist(rng, 5)
    ref = 0.0
    for pi, qi in zip(p, q):
        ref += pi * math.log(pi / qi)
    assert kl_div(p, q) == pytest.approx(ref, abs=1e-10)


def test_kl_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        kl_div([0.5, 0.5], [1.0])
    with pytest.raises(ValueError, match="length mismatch"):
        jsd([0.5, 0.5], [1.0])


def test_jsd_values():
    p = np.array([0.1, 0.9])
    assert jsd(p, p) == 0.0
    assert jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2), abs=1e-12)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.integers(2, 10))
def test_divergence_properties(seed, n):
    rng = np.random.default_rng(seed)
    p, q = random_dist(rng, n), random_dist(rng, n)
    assert kl_div(p, q) >= 0
    j = jsd(p, q)
    assert 0 <= j <= math.log(2) + 1e-15
    assert j == pytest.approx(jsd(q, p), abs=1e-12)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_softmax_divergences_match_clamped_versions(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=n), rng.normal(size=n)
    assert kl_softmax(a, b)[0] == pytest.approx(kl_div(softmax(a), softmax(b)), abs=1e-12)
    assert jsd_softmax(a, b)[0] == pytest.approx(jsd(softmax(a), softmax(b)), abs=1e-12)


@pytest.mark.parametrize("fn", [kl_softmax, jsd_softmax])
def test_softmax_divergence_gradients(fn, rng):
    for _ in range(5):
        a, b = 2 * rng.normal(size=6), 2 * rng.normal(size=6)
        _, ga, gb = fn(a, b)
        na = finite_diff_grad(lambda x: fn(x, b)[0], a)
        nb = finite_diff_grad(lambda x: fn(a, x)[0], b)
        assert relative_error(ga, na).max() < 1e-6
        assert relative_error(gb, nb).max() < 1e-6


def test_finite_diff_quadratic():
    np.testing.assert_allclose(finite_diff_grad(lambda x: float(x @ x), [3.0]), [6.0], atol=1e-8)


def test_finite_diff_constant():
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 4.2, np.ones(5)), np.zeros(5))


def test_finite_diff_softmax_ce(rng):
    # analytic gradient of -log softmax(v)[k] is softmax(v) - onehot(k)
    v, k = rng.normal(size=7), 3
    analytic = softmax(v)
    analytic[k] -= 1
    numeric = finite_diff_grad(lambda x: -log_softmax(x)[k], v)
    assert relative_error(analytic, numeric).max() < 1e-4


def test_finite_diff_nonfinite():
    with pytest.raises(FloatingPointError, match="coordinate 0"):
        finite_diff_grad(lambda x: math.inf, [1.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_jsd_softmax_equal_rows_exact_zero(a):
    value, ga, gb = jsd_softmax(a, a.copy())
    assert value == 0.0
    assert not ga.any() and not gb.any()
