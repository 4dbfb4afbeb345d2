import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

from fbm_control.lq import riccati_solution
from fbm_control.sde import (compute_transforms, consistency_check, cost, make_drivers, moment_sup,
                             sample_costs, simulate_density, simulate_state_original, simulate_transformed,
                             trapezoid_weights)
from fbm_control.system import ConstantPolicy, ShiftedPolicy, build_system, load_config, load_system


def scalar_system(b="0", sigma="0", h="0", f="0", phi="0", A=None, hurst=0.7, x0=1.0):
    cfg = {
        "dimensions": {"state": 1, "control": 1, "noise": 1, "observation": 1},
        "model": {"horizon": 1.0, "hurst": hurst, "x0": [x0]},
        "coefficients": {"b": [b], "sigma": [[sigma]], "h": [h], "f": f, "Phi": phi},
    }
    if A is not None:
        cfg["A"] = {"nilpotency": 1, "generators": [[[A]]]}
    return build_system(cfg)


def e12e23_linear(hurst=0.7):
    cfg = load_config("nilpotent_e12e23")
    cfg["model"]["hurst"] = hurst
    return build_system(cfg)


ZERO = ConstantPolicy(0.0)


def test_drivers_coarsen_by_summing():
    spec = load_system("lq_toy")
    drv = make_drivers(spec, 5, 8, seed=3)
    dW, dWt = drv.increments(5)
    assert np.allclose(dW, drv.dW.reshape(5, 32, 8, 1).sum(axis=2))
    assert dWt.shape == (5, 32, 1)
    with pytest.raises(ValueError):
        drv.increments(9)


def test_frozen_state():
    spec = scalar_system(x0=2.0)
    drv = make_drivers(spec, 4, 6, seed=1)
    _, X, _, _ = simulate_state_original(spec, drv, ZERO)
    assert np.all(X == 2.0)


def test_commuting_closed_form_state():
    spec = scalar_system(A="0.8", x0=1.5)
    drv = make_drivers(spec, 3, 10, seed=2)
    exact = 1.5 * np.exp(0.8 * drv.B[:, :, 0])
    _, X, _, _ = simulate_state_original(spec, drv, ZERO, scheme="exponential")
    assert np.abs(X[:, :, 0] - exact).max() < 1e-4
    errs = []
    for scheme in ("young", "davie"):
        _, X, _, _ = simulate_state_original(spec, drv, ZERO, scheme=scheme)
        errs.append(np.abs(X[:, :, 0] - exact).max())
    assert errs[1] < errs[0] / 10


def test_deterministic_state_converges_to_ode():
    spec = scalar_system(b="-x[0] + sin(3*t)", x0=0.5)
    ode = solve_ivp(lambda t, x: -x + np.sin(3 * t), (0, 1), [0.5], rtol=1e-12, atol=1e-12, dense_output=True)
    finals = []
    for level in (12, 13):
        drv = make_drivers(spec, 1, level, seed=0)
        _, X, _, _ = simulate_state_original(spec, drv, ZERO)
        finals.append(X[0, -1, 0])
    assert abs(finals[1] - ode.y[0, -1]) < 1e-4
    assert abs(2 * finals[1] - finals[0] - ode.y[0, -1]) < 1e-6


def test_identity_transform_is_path_for_path():
    spec = load_system("lq_toy")
    drv = make_drivers(spec, 50, 7, seed=4)
    pol = ConstantPolicy(-0.3)
    _, X, _, _ = simulate_state_original(spec, drv, pol)
    batch = simulate_transformed(spec, drv, pol, measure="physical")
    assert np.abs(batch.Y - X).max() < 1e-12
    assert np.abs(batch.X - X).max() < 1e-12
    assert consistency_check(spec, drv, pol, [5, 7]).sup_error.max() < 1e-8


@pytest.mark.parametrize("measure", ["reference", "physical"])
def test_blind_sensor_observation_is_the_noise(measure):
    spec = load_system("lq_toy")
    drv = make_drivers(spec, 20, 6, seed=5)
    batch = simulate_transformed(spec, drv, ZERO, measure=measure)
    assert np.array_equal(batch.zeta[:, 1:], np.cumsum(drv.dWt, axis=1))
    assert np.all(batch.rho == 1.0)
    assert np.all(batch.zeta[:, 0] == 0) and np.all(batch.Y[:, 0] == spec.x0)


def test_transformed_consistency_refines():
    spec = e12e23_linear()
    pol = ConstantPolicy(0.2)
    drv = make_drivers(spec, 200, 10, fbm_level=10, seed=6)
    rep = consistency_check(spec, drv, pol, [6, 8, 10])
    median = np.median(rep.sup_error, axis=0)
    assert np.all(np.diff(median) < 0)
    assert median[-1] < 1e-2
    assert np.mean(rep.sup_error[:, -1] < rep.sup_error[:, 0]) >= 0.95


def test_consistency_ignores_unused_drivers():
    spec = e12e23_linear()
    pol = ConstantPolicy(0.2)
    drv = make_drivers(spec, 20, 8, seed=7)
    a = consistency_check(spec, drv, pol, [6, 8]).sup_error
    drv.dWt = np.random.default_rng(99).standard_normal(drv.dWt.shape) * 0.06
    b = consistency_check(spec, drv, pol, [6, 8]).sup_error
    assert np.array_equal(a, b)


def test_density_closed_form_and_positivity():
    spec = scalar_system(h="0.7")
    drv = make_drivers(spec, 100, 10, seed=8)
    batch = simulate_transformed(spec, drv, ZERO)
    exact = np.exp(0.7 * batch.zeta[:, -1, 0] - 0.5 * 0.49)
    assert np.abs(batch.rho[:, -1] - exact).max() < 1e-3
    euler = simulate_density(spec, batch, "euler")
    assert np.abs(euler[:, -1] - exact).max() < 0.2
    spec = load_system("partially_observed_lq")
    drv = make_drivers(spec, 500, 8, seed=9)
    batch = simulate_transformed(spec, drv, ConstantPolicy(3.0))
    assert np.all(batch.rho > 0)
    assert np.allclose(simulate_density(spec, batch), batch.rho)


def test_density_martingale_mean():
    spec = load_system("partially_observed_lq")
    drv = make_drivers(spec, 10_000, 7, seed=10)
    from fbm_control.system import policy_from_expression
    batch = simulate_transformed(spec, drv, policy_from_expression(spec, spec.control["expression"]))
    rho = batch.rho[:, -1]
    assert abs(rho.mean() - 1) < 3 * rho.std(ddof=1) / np.sqrt(len(rho))


def test_cost_examples():
    spec = scalar_system(phi="2*x[0] + 1", x0=0.75)
    drv = make_drivers(spec, 10, 6, seed=11)
    assert cost(spec, simulate_transformed(spec, drv, ZERO))[0] == 2.5
    spec = scalar_system(f="1", b="-x[0]", sigma="0.5")
    j, se = cost(spec, simulate_transformed(spec, make_drivers(spec, 10, 6), ZERO))
    assert j == pytest.approx(1.0, abs=1e-12) and se == pytest.approx(0.0, abs=1e-12)
    assert trapezoid_weights(np.linspace(0, 2, 9)).sum() == pytest.approx(2.0)


def test_weak_mean_of_linear_sde():
    spec = scalar_system(b="-0.8*x[0] + 0.3", sigma="0.5", x0=1.0)
    drv = make_drivers(spec, 4000, 8, seed=12)
    batch = simulate_transformed(spec, drv, ZERO)
    xt = batch.X[:, -1, 0]
    exact = 0.3 / 0.8 + (1 - 0.3 / 0.8) * np.exp(-0.8)
    assert abs(xt.mean() - exact) < 3 * xt.std(ddof=1) / np.sqrt(len(xt)) + 2e-3


def test_riccati_control_beats_perturbations():
    spec = load_system("lq_toy")
    drv = make_drivers(spec, 2000, 8, seed=13)
    tr = compute_transforms(spec, drv)
    opt = riccati_solution(spec).policy()
    base = sample_costs(spec, simulate_transformed(spec, drv, opt, transforms=tr))
    for shift in np.linspace(-0.5, 0.5, 21):
        if shift == 0:
            continue
        other = sample_costs(spec, simulate_transformed(spec, drv, ShiftedPolicy(opt, shift), transforms=tr))
        gap = other - base
        se = gap.std(ddof=1) / np.sqrt(len(gap))
        assert gap.mean() > 2 * se or abs(gap.mean()) < 2 * se


def test_moment_sup():
    vals = np.ones((10, 5, 2))
    m, se = moment_sup(vals, 2)
    assert m == pytest.approx(2.0) and se == 0.0


@given(seed=st.integers(0, 2 ** 31), level=st.integers(3, 7))
def test_same_seed_same_batch(seed, level):
    spec = load_system("partially_observed_lq")
    pol = ConstantPolicy(0.1)
    a = simulate_transformed(spec, make_drivers(spec, 4, level, seed=seed), pol)
    b = simulate_transformed(spec, make_drivers(spec, 4, level, seed=seed), pol)
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.rho, b.rho)
    assert np.all(a.rho > 0)
