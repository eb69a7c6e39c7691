import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalfreq import LoadStep, apply_scenario, init_dynamic_state, simulate, solve_power_flow
from modalfreq.dynamics import coi_weights, get_model
from modalfreq.linearize import (EquilibriumError, SingularAlgebraicError, equilibrate, kron_reduce,
                                 linearize, numerical_jacobian)
from modalfreq.modal import eigendecompose, modal_response


@pytest.fixture(scope="module")
def base(ieee39):
    pf = solve_power_flow(ieee39)
    layout, state = init_dynamic_state(ieee39, pf)
    return layout, state, linearize(ieee39, layout, state)


def test_linear_device_jacobian_is_exact():
    fun = lambda z: np.array([-z[0] + 2 * z[1], z[0] - z[1]])
    jac = numerical_jacobian(fun, np.array([0.3, -1.7]))
    np.testing.assert_allclose(jac, [[-1, 2], [1, -1]], rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(kron_reduce(jac[:1, :1], jac[:1, 1:], jac[1:, :1], jac[1:, 1:]), [[1.0]],
                               rtol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_fd_jacobian_matches_complex_step(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    b = rng.standard_normal(n)
    fun = lambda z: np.sin(a @ z) + b * z ** 3 + np.exp(0.3 * z)
    z0 = rng.uniform(-1, 1, n)
    h = 1e-30
    oracle = np.column_stack([np.imag(fun(z0 + 1j * h * e)) / h for e in np.eye(n)])
    np.testing.assert_allclose(numerical_jacobian(fun, z0), oracle, atol=1e-6, rtol=1e-6)


def test_kron_examples():
    j1 = np.array([[1.0, 2.0], [3.0, 4.0]])
    a = kron_reduce(j1, np.zeros((2, 3)), np.ones((3, 2)), np.eye(3))
    np.testing.assert_array_equal(a, j1)
    assert kron_reduce(0.0, 1.0, 1.0, -1.0) == pytest.approx(1.0)


def test_singular_j4_names_equation():
    j4 = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 2.0]])
    with pytest.raises(SingularAlgebraicError, match="beta"):
        kron_reduce(np.eye(1), np.ones((1, 3)), np.ones((3, 1)), j4, ["alpha", "beta", "gamma"])


def test_ieee39_state_matrix(base):
    layout, _, lm = base
    assert lm.a_s.shape == (139, 139)
    assert lm.j1.shape == (139, 139) and lm.j2.shape == (139, layout.l)
    assert lm.j3.shape == (layout.l, 139) and lm.j4.shape == (layout.l, layout.l)
    assert np.isfinite(lm.j4_cond)
    recomputed = lm.j1 - lm.j2 @ np.linalg.solve(lm.j4, lm.j3)
    np.testing.assert_allclose(lm.a_s, recomputed, atol=1e-10, rtol=0)


def test_base_case_is_stable(base):
    assert np.linalg.eigvals(base[2].a_s).real.max() <= 0


def test_equilibrate_keeps_exact_equilibrium(ieee39, base):
    layout, state, _ = base
    eq = equilibrate(ieee39, layout, state, tol=1e-8)
    np.testing.assert_array_equal(eq.x, state.x)
    np.testing.assert_array_equal(eq.y, state.y)


def test_post_step_equilibrium_matches_long_simulation(ieee39, base):
    layout, state, _ = base
    scenario = LoadStep(15, 20)
    post = apply_scenario(ieee39, scenario)
    eq = equilibrate(post, layout, state)
    model = get_model(post, layout)
    assert np.max(np.abs(model.fg(np.concatenate([eq.x, eq.y])))) <= 1e-10
    assert model.coi_speed(eq.x) < 1.0
    traj = simulate(ieee39, layout, state, scenario, horizon=60.0, dt=0.01)
    assert np.max(np.abs(eq.x - traj.x[-1])) < 1e-4


def test_no_frequency_regulation_is_singular(ieee39):
    free = dataclasses.replace(ieee39, governors=tuple(dataclasses.replace(g, r=1e12) for g in ieee39.governors))
    layout, state = init_dynamic_state(free, solve_power_flow(free))
    with pytest.raises(EquilibriumError, match="singular"):
        equilibrate(apply_scenario(free, LoadStep(15, 20)), layout, state)


def _linear_vs_nonlinear(case, layout, state, pct, horizon=10.0, dt=0.01):
    scenario = LoadStep(15, pct)
    post = apply_scenario(case, scenario)
    eq = equilibrate(post, layout, state)
    basis = eigendecompose(linearize(post, layout, eq).a_s)
    t = dt * np.arange(int(round(horizon / dt)) + 1)
    dx = modal_response(basis, state.x - eq.x, range(basis.n), t)
    c = coi_weights(case).c
    spd = layout.speed_idx
    linear = c @ (eq.x[spd][:, None] + dx[spd])
    nonlinear = simulate(case, layout, state, scenario, horizon, dt).x[:, spd] @ c
    return np.max(np.abs(linear - nonlinear))


def test_linear_model_tracks_small_disturbance(ieee39, base):
    layout, state, _ = base
    assert _linear_vs_nonlinear(ieee39, layout, state, 0.1) <= 1e-3


def test_linearization_error_is_second_order(ieee39, base):
    layout, state, _ = base
    e1 = _linear_vs_nonlinear(ieee39, layout, state, 2.0)
    e2 = _linear_vs_nonlinear(ieee39, layout, state, 4.0)
    assert 3.0 < e2 / e1 < 5.0
