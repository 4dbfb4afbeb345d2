import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

from fbm_control.lq import frozen_gamma, lq_parameters, riccati_solution, scalar_riccati_closed_form
from fbm_control.system import load_system


def test_riccati_matches_closed_form():
    spec = load_system("lq_toy")
    sol = riccati_solution(spec)
    p = spec.params
    exact = scalar_riccati_closed_form(p["b0"], p["b1"], p["q"], p["r"], p["g"], 1.0, sol.times)
    assert np.abs(sol.S - exact).max() < 1e-8
    assert sol.S[-1] == pytest.approx(p["g"])


def test_mean_and_control_relation():
    spec = load_system("lq_toy")
    sol = riccati_solution(spec)
    assert sol.m[0] == 1.0
    assert np.allclose(sol.control, -sol.S * sol.m)
    assert np.allclose(sol.adjoint_mean, sol.S * sol.m)
    policy = sol.policy()
    assert policy.at(0.5)[0] == pytest.approx(np.interp(0.5, sol.times, sol.control))


def test_frozen_gamma_is_a_step_function():
    times = np.linspace(0, 1, 5)
    g = frozen_gamma(times, [1.0, 2.0, 3.0, 4.0, 5.0])
    assert np.array_equal(g(np.array([0.0, 0.1, 0.25, 0.74, 1.0])), [1.0, 1.0, 2.0, 3.0, 5.0])


def test_constant_gamma_rescales_the_problem():
    spec = load_system("lq_toy")
    base = riccati_solution(spec)
    scaled = riccati_solution(spec, lambda t: np.full(np.shape(t), 2.0))
    # a constant factor 2 scales S by 1/4; the closed loop Gamma^2 S is unchanged
    assert np.allclose(scaled.S, base.S / 4, atol=1e-8)
    assert np.allclose(scaled.m, base.m, atol=1e-8)
    assert np.allclose(scaled.control, base.control / 2, atol=1e-8)


def test_requires_scalar_lq():
    with pytest.raises(ValueError):
        lq_parameters(load_system("commuting"))


@given(q=st.floats(0.1, 5), r=st.floats(0.1, 5), g=st.floats(0, 5), b0=st.floats(-1, 1))
def test_closed_form_solves_the_ode(q, r, g, b0):
    t = np.linspace(0, 1, 11)
    back = solve_ivp(lambda _, s: -(q + 2 * b0 * s - s ** 2 / r), (1.0, 0.0), [g], t_eval=t[::-1],
                     rtol=1e-11, atol=1e-12)
    S = scalar_riccati_closed_form(b0, 1.0, q, r, g, 1.0, t)
    assert np.allclose(S, back.y[0][::-1], rtol=1e-7, atol=1e-9)
