import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynodisco.errors import InvalidArgumentError
from dynodisco.library import (FeatureLibrary, Monomial, Trig, build_library, eval_features,
                               model_rhs, monomial_exponents, sigmoid, term_name)
from dynodisco.systems import SystemKind, SystemParams, eval_true_rhs, true_coefficients

finite = st.floats(-3, 3, allow_nan=False)


@pytest.mark.parametrize("n,degree,trig,p", [(3, 5, False, 56), (2, 5, False, 21), (2, 5, True, 24)])
def test_candidate_counts(n, degree, trig, p):
    assert build_library(n, degree, trig).p == p


@given(st.sampled_from([2, 3]), st.integers(1, 6))
def test_count_is_binomial(n, degree):
    lib = build_library(n, degree)
    assert lib.p == math.comb(n + degree, degree) == len(set(lib.terms))


def test_graded_lex_order():
    assert monomial_exponents(2, 2) == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    lib = build_library(2, 5, True)
    assert lib.terms[-3:] == (Trig("sin(x1)"), Trig("sin(x2)"), Trig("sin(x1+x2)"))
    assert [t.degree for t in lib.terms[:-3]] == sorted(t.degree for t in lib.terms[:-3])


def test_trig_requires_two_dimensions():
    with pytest.raises(InvalidArgumentError):
        build_library(3, 5, include_trig=True)


def test_term_names():
    assert term_name(Monomial((1, 0, 2)), ("x", "y", "z")) == "x*z^2"
    assert term_name(Monomial((0, 0)), ("x1", "x2")) == "1"
    assert term_name(Trig("sin(x1+x2)"), ("x1", "x2")) == "sin(x1+x2)"


def test_features_at_origin():
    lib = build_library(2, 5, True)
    phi = eval_features(lib, np.zeros(2))
    assert phi[0] == 1.0 and not phi[1:].any()


def test_single_monomial_value():
    lib = build_library(2, 5)
    assert eval_features(lib, np.array([2.0, 3.0]))[lib.index_of(Monomial((2, 1)))] == 12.0


@settings(max_examples=50)
@given(st.lists(finite, min_size=2, max_size=2), st.booleans())
def test_features_match_scalar_oracle(x, trig):
    lib = build_library(2, 5, trig)
    x = np.array(x)
    expect = []
    for t in lib.terms:
        if isinstance(t, Monomial):
            expect.append(x[0] ** t.exponents[0] * x[1] ** t.exponents[1])
        else:
            expect.append({"sin(x1)": math.sin(x[0]), "sin(x2)": math.sin(x[1]),
                           "sin(x1+x2)": math.sin(x[0] + x[1])}[t.tag])
    np.testing.assert_allclose(eval_features(lib, x), expect, rtol=1e-12, atol=1e-12)


@settings(max_examples=30)
@given(st.lists(finite, min_size=3, max_size=3))
def test_jacobian_matches_finite_differences(x):
    lib = build_library(3, 4)
    x = np.array(x)
    _, jac = lib.evaluate_with_jacobian(x)
    h = 1e-6
    for d in range(3):
        e = np.zeros(3)
        e[d] = h
        fd = (lib.evaluate(x + e) - lib.evaluate(x - e)) / (2 * h)
        np.testing.assert_allclose(jac[:, d], fd, rtol=1e-6, atol=1e-5)


def test_batched_evaluation_matches_pointwise():
    lib = build_library(2, 5, True)
    X = np.random.default_rng(0).normal(size=(4, 5, 2))
    batched = lib.evaluate(X)
    assert batched.shape == (4, 5, 24)
    np.testing.assert_allclose(batched[2, 3], lib.evaluate(X[2, 3]))


def test_descriptor_round_trip():
    lib = build_library(2, 5, True)
    assert FeatureLibrary.from_descriptor(lib.descriptor()) == lib
    bad = lib.descriptor()
    bad["terms"] = bad["terms"][::-1]
    with pytest.raises(InvalidArgumentError):
        FeatureLibrary.from_descriptor(bad)


def test_model_rhs_reproduces_lorenz():
    lib = build_library(3, 5)
    params = SystemParams(SystemKind.LORENZ, (10.0, 28.0, 8.0 / 3.0))
    xi = true_coefficients(SystemKind.LORENZ, params, lib)
    rhs = model_rhs(np.ones_like(xi), xi, lib)
    np.testing.assert_allclose(rhs(np.ones(3)), [0.0, 26.0, -5.0 / 3.0], atol=1e-12)
    np.testing.assert_allclose(rhs(np.ones(3)), eval_true_rhs(SystemKind.LORENZ, params, np.ones(3)))


def test_zero_mask_gives_zero_field():
    lib = build_library(3, 2)
    rhs = model_rhs(np.zeros((3, lib.p)), np.ones((3, lib.p)), lib)
    assert not rhs(np.array([1.0, -2.0, 0.5])).any()


def test_relaxed_infinite_logits_match_binary_ones():
    lib = build_library(2, 3)
    xi = np.random.default_rng(1).normal(size=(2, lib.p))
    x = np.array([0.3, -0.7])
    relaxed = model_rhs(np.full((2, lib.p), np.inf), xi, lib, relaxed=True)(x)
    np.testing.assert_array_equal(relaxed, model_rhs(np.ones((2, lib.p)), xi, lib)(x))


@settings(max_examples=30)
@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 1000))
def test_model_rhs_is_linear_in_coefficients(a, b, seed):
    lib = build_library(3, 3)
    rng = np.random.default_rng(seed)
    x1, x2 = rng.normal(size=(2, 3, lib.p))
    x = rng.normal(size=3)
    mask = rng.integers(0, 2, size=(3, lib.p))
    lhs = model_rhs(mask, a * x1 + b * x2, lib)(x)
    rhs = a * model_rhs(mask, x1, lib)(x) + b * model_rhs(mask, x2, lib)(x)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_model_rhs_shape_check():
    lib = build_library(2, 2)
    with pytest.raises(InvalidArgumentError):
        model_rhs(np.ones((2, 3)), np.ones((2, lib.p)), lib)


def test_sigmoid_is_stable_at_extremes():
    out = sigmoid(np.array([-np.inf, -800.0, 0.0, 800.0, np.inf]))
    np.testing.assert_array_equal(out, [0.0, 0.0, 0.5, 1.0, 1.0])
