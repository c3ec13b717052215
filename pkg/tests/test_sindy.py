import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynodisco.errors import InvalidArgumentError
from dynodisco.sindy import (EmptySupportWarning, StlsqConfig, estimate_derivatives,
                             fit_environment, stack_regression_data, stlsq_fit)
from dynodisco.systems import (PARAM_MEANS, SystemKind, SystemParams, default_library,
                               eval_true_rhs, generate_trajectory, true_support)


@pytest.fixture(scope="module")
def linear_dense():
    kind = SystemKind.LINEAR3D
    params = SystemParams(kind, PARAM_MEANS[kind])
    rng = np.random.default_rng(0)
    trajs = [generate_trajectory(kind, params, rng.standard_normal(3), 4.0, 0.01)
             for _ in range(8)]
    lib = default_library(kind)
    return lib, trajs, stack_regression_data([(t.states, t.dt) for t in trajs], lib)


@given(st.floats(-5, 5), st.floats(-5, 5), st.sampled_from([0.01, 0.1, 0.3]))
def test_derivatives_exact_on_affine(a, b, dt):
    t = np.arange(10) * dt
    D = estimate_derivatives((a + b * t)[:, None], dt)
    np.testing.assert_allclose(D[:, 0], b, atol=1e-9 * (1 + abs(a) / dt))


def test_derivatives_exact_on_quadratic():
    t = np.arange(12) * 0.1
    D = estimate_derivatives((t ** 2)[:, None], 0.1)
    np.testing.assert_allclose(D[:, 0], 2 * t, atol=1e-12)


def test_derivatives_need_three_samples():
    with pytest.raises(InvalidArgumentError):
        estimate_derivatives(np.zeros((2, 1)), 0.1)


def test_derivatives_on_fine_lorenz():
    # the truncation error is dt^2 x'''/6, so it is bounded relative to the field scale
    kind = SystemKind.LORENZ
    params = SystemParams(kind, PARAM_MEANS[kind])
    errs = []
    for dt in (0.001, 0.0005):
        tr = generate_trajectory(kind, params, [1.0, 1.0, 1.0], 1.0, dt)
        true = eval_true_rhs(kind, params, tr.states)
        errs.append(np.max(np.abs(estimate_derivatives(tr.states, dt) - true)))
        assert errs[-1] / np.max(np.abs(true)) < 1e-4
    assert 3.5 < errs[0] / errs[1] < 4.5


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_recovers_consistent_system(seed):
    rng = np.random.default_rng(seed)
    Theta = rng.normal(size=(40, 4))
    w = rng.uniform(0.5, 2.0, size=(2, 4)) * rng.choice([-1, 1], size=(2, 4))
    Xi = stlsq_fit(Theta, Theta @ w.T, StlsqConfig(0.05))
    np.testing.assert_allclose(Xi, w, atol=1e-8)


def test_large_threshold_gives_zero_with_warning():
    rng = np.random.default_rng(1)
    Theta = rng.normal(size=(30, 3))
    with pytest.warns(EmptySupportWarning):
        Xi = stlsq_fit(Theta, Theta @ np.array([[0.1, -0.2, 0.3]]).T, StlsqConfig(10.0))
    assert not Xi.any()


def test_shape_mismatch_rejected():
    with pytest.raises(InvalidArgumentError):
        stlsq_fit(np.zeros((5, 2)), np.zeros((4, 1)))


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_support_non_increasing_over_rounds(seed, thr):
    rng = np.random.default_rng(seed)
    Theta = rng.normal(size=(25, 6))
    y = Theta @ rng.normal(size=(6, 2)) + 0.3 * rng.normal(size=(25, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptySupportWarning)
        _, history = stlsq_fit(Theta, y, StlsqConfig(thr), return_history=True)
    for supports in history:
        for a, b in zip(supports, supports[1:]):
            assert not np.any(b & ~a)


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_normal_equations_on_active_set(seed):
    rng = np.random.default_rng(seed)
    Theta = rng.normal(size=(30, 5))
    y = Theta @ rng.normal(size=(5, 1)) + 0.1 * rng.normal(size=(30, 1))
    Xi = stlsq_fit(Theta, y, StlsqConfig(0.2))
    act = Xi[0] != 0
    A = Theta[:, act]
    resid = A.T @ (y[:, 0] - A @ Xi[0, act])
    assert np.max(np.abs(resid)) < 1e-6


def test_l1_option_shrinks_coefficients():
    rng = np.random.default_rng(2)
    Theta = rng.normal(size=(50, 3))
    y = Theta @ np.array([[1.0, -2.0, 0.5]]).T
    plain = stlsq_fit(Theta, y, StlsqConfig(0.0))
    lasso = stlsq_fit(Theta, y, StlsqConfig(0.0, l1_weight=5.0))
    assert np.abs(lasso).sum() < np.abs(plain).sum()


@pytest.mark.parametrize("thr", [0.02, 0.05, 0.09])
def test_linear_support_recovery(linear_dense, thr):
    lib, _, (Theta, dX) = linear_dense
    Xi = stlsq_fit(Theta, dX, StlsqConfig(thr))
    np.testing.assert_array_equal((Xi != 0).astype(int), true_support(SystemKind.LINEAR3D, lib))


def test_single_threshold_grid_matches_stlsq(linear_dense):
    lib, trajs, _ = linear_dense
    Xi = fit_environment(trajs, lib, (0.05,))
    v = int(0.8 * trajs[0].m)
    Theta, dX = stack_regression_data([(t.states[:v], t.dt) for t in trajs], lib)
    np.testing.assert_array_equal(Xi, stlsq_fit(Theta, dX, StlsqConfig(0.05)))


def test_selection_is_argmin_of_scores(linear_dense):
    lib, trajs, _ = linear_dense
    grid = (0.0, 0.05, 0.5)
    best, scores = fit_environment(trajs, lib, grid, return_scores=True)
    np.testing.assert_array_equal(best, fit_environment(trajs, lib, (grid[int(np.argmin(scores))],)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        a = fit_environment(trajs, lib)
        b = fit_environment(trajs, lib)
    np.testing.assert_array_equal(a, b)


def test_fit_environment_rejects_empty_inputs(linear_dense):
    lib, trajs, _ = linear_dense
    with pytest.raises(InvalidArgumentError):
        fit_environment([], lib)
    with pytest.raises(InvalidArgumentError):
        fit_environment(trajs, lib, ())
