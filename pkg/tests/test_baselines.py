import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynodisco.baselines import (MaskRule, baseline_model, intersection_mask, mask_to_relaxed,
                                 sindy_model, union_mask)
from dynodisco.core import quantize_mask
from dynodisco.errors import InvalidArgumentError
from dynodisco.systems import SplitSpec, build_benchmark_dataset, default_library


def random_coeffs(rng, E, n, p, density):
    vals = rng.normal(size=(E, n, p))
    return np.where(rng.random((E, n, p)) < density, vals, 0.0)


def brute_force(coeffs, quantifier):
    E, n, p = coeffs.shape
    out = np.zeros((n, p), dtype=int)
    for i in range(n):
        for j in range(p):
            out[i, j] = int(quantifier(coeffs[e, i, j] != 0 for e in range(E)))
    return out


def test_masks_match_per_entry_quantifiers_on_100_sets():
    rng = np.random.default_rng(0)
    for _ in range(100):
        E, n, p = rng.integers(1, 10), rng.integers(1, 4), rng.integers(1, 30)
        c = random_coeffs(rng, E, n, p, rng.uniform(0.1, 0.95))
        np.testing.assert_array_equal(intersection_mask(c), brute_force(c, all))
        np.testing.assert_array_equal(union_mask(c), brute_force(c, any))


@given(st.integers(0, 10_000))
def test_masks_are_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    c = random_coeffs(rng, 6, 2, 8, 0.6)
    perm = rng.permutation(6)
    np.testing.assert_array_equal(intersection_mask(c), intersection_mask(c[perm]))
    np.testing.assert_array_equal(union_mask(c), union_mask(c[perm]))


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_intersection_within_union(seed, E):
    c = random_coeffs(np.random.default_rng(seed), E, 3, 10, 0.5)
    assert np.all(intersection_mask(c) <= union_mask(c))


def test_single_environment_rules_agree():
    c = random_coeffs(np.random.default_rng(4), 1, 3, 12, 0.4)
    np.testing.assert_array_equal(intersection_mask(c), union_mask(c))
    np.testing.assert_array_equal(union_mask(c), (c[0] != 0).astype(int))


def test_bad_shapes_rejected():
    with pytest.raises(InvalidArgumentError):
        union_mask(np.zeros((3, 4)))
    with pytest.raises(InvalidArgumentError):
        intersection_mask(np.zeros((0, 2, 3)))


def test_relaxed_round_trip():
    m = np.array([[1, 0, 1], [0, 0, 1]])
    np.testing.assert_array_equal(quantize_mask(mask_to_relaxed(m)), m)


@pytest.fixture(scope="module")
def small_dataset():
    return build_benchmark_dataset("linear", 0, n_train_envs=3,
                                   train=SplitSpec(2.0, 0.05, 3))


def test_baseline_models_use_their_masks(small_dataset):
    lib = default_library(small_dataset.kind)
    rng = np.random.default_rng(1)
    c = random_coeffs(rng, 3, lib.n, lib.p, 0.5)
    inter = baseline_model("intersection", small_dataset, lib, coeffs=c)
    union = baseline_model(MaskRule.UNION, small_dataset, lib, coeffs=c)
    np.testing.assert_array_equal(inter.mask, intersection_mask(c))
    np.testing.assert_array_equal(union.mask, union_mask(c))
    assert inter.method == "sindy-intersection" and union.method == "sindy-union"
    plain = sindy_model(small_dataset, lib, coeffs=c)
    assert plain.mask.all()
    np.testing.assert_array_equal(plain.coeffs, c)


def test_unknown_rule_rejected(small_dataset):
    with pytest.raises(ValueError):
        baseline_model("majority", small_dataset, default_library(small_dataset.kind))
