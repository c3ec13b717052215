import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynodisco.errors import IntegrationError, InvalidArgumentError
from dynodisco.integrators import (SolveRequest, grid_length, ode_solve, reference_solve,
                                   rk4_step, rk4_steps)
from dynodisco.systems import SystemKind, SystemParams, eval_true_rhs


def decay(x, t):
    return -x


def lorenz(x, t):
    return eval_true_rhs(SystemKind.LORENZ, SystemParams(SystemKind.LORENZ, (10, 28, 8 / 3)), x)


def test_zero_field_is_identity():
    x = np.array([1.0, -2.0])
    assert np.array_equal(rk4_step(lambda y, t: np.zeros_like(y), x, 0.0, 0.3), x)


def test_constant_field_is_exact():
    c = np.array([0.5, -1.5])
    out = rk4_step(lambda y, t: c, np.zeros(2), 0.0, 0.2)
    np.testing.assert_allclose(out, 0.2 * c, rtol=0, atol=1e-15)


def test_one_step_decay():
    assert abs(rk4_step(decay, np.array([1.0]), 0.0, 0.1)[0] - math.exp(-0.1)) < 1e-7


def test_nonfinite_step_raises():
    with pytest.raises(IntegrationError):
        rk4_step(lambda y, t: y ** 50, np.array([1e10]), 0.0, 1.0)


def test_solve_decay_to_one():
    out = ode_solve(SolveRequest(np.array([1.0]), decay, 0.0, 1.0, 0.05))
    assert out.shape == (21, 1)
    # closed form: RK4 on x' = -x multiplies by the degree-4 Taylor polynomial of e^-h
    h = 0.05
    amp = 1 - h + h ** 2 / 2 - h ** 3 / 6 + h ** 4 / 24
    assert abs(out[-1, 0] - amp ** 20) < 1e-15
    assert abs(out[-1, 0] - math.exp(-1.0)) < 2.5e-8


def test_single_interval_has_two_rows():
    out = ode_solve(SolveRequest(np.array([2.0]), decay, 0.0, 0.1, 0.1))
    assert out.shape == (2, 1)
    np.testing.assert_array_equal(out[1], rk4_step(decay, np.array([2.0]), 0.0, 0.1))


@given(st.floats(0.05, 5.0), st.sampled_from([0.01, 0.05, 0.1, 0.25]))
def test_grid_length_arithmetic(span, dt):
    steps = max(1, round(span / dt))
    assert grid_length(0.0, steps * dt, dt) == steps + 1


def test_invalid_requests():
    with pytest.raises(InvalidArgumentError):
        SolveRequest(np.zeros(1), decay, 1.0, 0.0, 0.1)
    with pytest.raises(InvalidArgumentError):
        rk4_step(decay, np.ones(1), 0.0, -0.1)


def _global_error(dt):
    out = ode_solve(SolveRequest(np.array([1.0]), decay, 0.0, 1.0, dt))
    return abs(out[-1, 0] - math.exp(-1.0))


def test_global_error_ratio_near_sixteen():
    # the local error is O(dt^5); the factor 16 applies to the accumulated error
    errs = [_global_error(dt) for dt in (0.1, 0.05, 0.025)]
    for a, b in zip(errs, errs[1:]):
        assert 14.0 <= a / b <= 18.0


@settings(max_examples=20)
@given(st.floats(-2, 2), st.floats(0.5, 3.0))
def test_time_translation_invariance(x0, T):
    T = round(T / 0.05) * 0.05
    a = ode_solve(SolveRequest(np.array([x0]), decay, 0.0, T, 0.05))
    b = ode_solve(SolveRequest(np.array([x0]), decay, 5.0, 5.0 + T, 0.05))
    np.testing.assert_array_equal(a, b)


def test_reference_agrees_with_fine_rk4_on_lorenz():
    x0 = np.array([1.0, 1.0, 1.0])
    grid = np.linspace(0.0, 1.0, 21)
    ref = reference_solve(lorenz, x0, grid)
    fine = ode_solve(SolveRequest(x0, lorenz, 0.0, 1.0, 0.05, substeps=100))
    assert np.max(np.abs(ref - fine)) < 1e-6


def test_reference_harmonic_period():
    def osc(x, t):
        return np.array([x[1], -x[0]])
    out = reference_solve(osc, np.array([1.0, 0.0]), np.array([0.0, 2 * math.pi]))
    np.testing.assert_allclose(out[-1], [1.0, 0.0], atol=1e-7)


def test_reference_single_point_grid():
    out = reference_solve(decay, np.array([3.0, 4.0]), np.array([0.0]))
    np.testing.assert_array_equal(out, [[3.0, 4.0]])


def test_reference_rejects_unsorted_grid():
    with pytest.raises(InvalidArgumentError):
        reference_solve(decay, np.ones(1), np.array([0.0, 0.2, 0.1]))


@pytest.mark.parametrize("kind", list(SystemKind))
def test_reference_and_rk4_agree_on_benchmarks(kind):
    from dynodisco.systems import BENCHMARK_SPECS, PARAM_MEANS, lotka_volterra_grid
    vals = lotka_volterra_grid()[4].values if kind is SystemKind.LOTKA_VOLTERRA \
        else PARAM_MEANS[kind]
    params = SystemParams(kind, vals)
    x0 = {3: np.array([0.5, -0.3, 0.8])}.get(kind.dim, np.array([1.2, 0.4]))

    def f(x, t):
        return eval_true_rhs(kind, params, x)

    spec = BENCHMARK_SPECS[kind].train
    T = min(spec.horizon, 2.0)
    grid = np.arange(0.0, T + 1e-12, spec.dt)
    ref = reference_solve(f, x0, grid)
    rk = ode_solve(SolveRequest(x0, f, 0.0, grid[-1], spec.dt, substeps=50))
    assert np.max(np.abs(ref - rk)) < 1e-6


def test_step_counter_counts_states():
    before = rk4_steps.count
    rk4_step(decay, np.ones((7, 2)), 0.0, 0.1)
    assert rk4_steps.count - before == 7
