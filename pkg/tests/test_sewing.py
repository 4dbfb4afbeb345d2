import numpy as np
import pytest
from hypothesis import given, strategies as st

from fbm_control.fbm import FbmConfig, SampledPath, dyadic_times, refine, sample_fbm
from fbm_control.lift import lift_piecewise_linear
from fbm_control.sewing import (ControlledPath, Germ, SewingPreconditionError, defect_slope,
                                function_controlled, local_bound_slope, rough_germ, rough_integral, sew,
                                young_germ, young_integral)


def pl_sample(hurst, level=8, seed=0, fine=12):
    return refine(sample_fbm(FbmConfig(hurst, levels=level, seed=seed)), fine)


def identity_controlled(path):
    return function_controlled(lambda v: v, lambda v: np.ones(v.shape + (1,)), path)


def test_additive_germ_is_exact_at_every_level():
    times = dyadic_times(1.0, 8)
    F = np.sin(3 * times)[:, None]
    germ = Germ(lambda i, j: F[j] - F[i], times, 1.0, 1.0)
    sewn = sew(germ, levels=[2, 4, 6, 8], check=False)
    assert np.allclose(sewn.finest, F - F[0], atol=1e-14)
    assert np.allclose(sewn.report.values_at_T[:, 0], F[-1, 0] - F[0, 0], atol=1e-14)


def test_constant_integrand():
    x = pl_sample(0.7, fine=10)
    z = SampledPath(x.times, np.full(len(x.times), 2.5))
    sewn = young_integral(z, x, alpha=0.65, beta=1.0)
    assert np.allclose(sewn.limit[:, 0], 2.5 * (x.values[:, 0] - x.values[0, 0]), atol=1e-12)


def test_self_integral_of_piecewise_linear_path():
    x = pl_sample(0.7)
    germ = young_germ(x, x, 0.65, 0.65)
    sewn = sew(germ, levels=range(6, 13))
    assert abs(sewn.value[0] - 0.5 * x.values[-1, 0] ** 2) < 1e-8


def test_classical_integral_t_dt():
    times = dyadic_times(1.0, 12)
    t = SampledPath(times, times)
    sewn = young_integral(t, t, levels=range(6, 13), alpha=1.0, beta=1.0)
    assert abs(sewn.value[0] - 0.5) < 1e-10


def test_young_chain_rule_and_local_bound():
    x = pl_sample(0.7, seed=3)
    alpha = 0.65
    sewn = young_integral(x, x, levels=range(6, 13), alpha=alpha, beta=alpha)
    assert abs(sewn.value[0] - 0.5 * x.values[-1, 0] ** 2) < 1e-6
    assert local_bound_slope(sewn, young_germ(x, x, alpha, alpha)) >= 2 * alpha - 0.1


def test_rough_identity_integrand_chain_rule():
    x = pl_sample(0.4, seed=1)
    lift = lift_piecewise_linear(x)
    sewn = rough_integral(identity_controlled(x), lift, 0.37, levels=range(6, 13))
    assert abs(sewn.value[0] - 0.5 * x.values[-1, 0] ** 2) < 1e-8


def test_rough_constant_integrand():
    x = pl_sample(0.4, seed=2, fine=10)
    lift = lift_piecewise_linear(x)
    n = len(x.times)
    z = ControlledPath(np.full((n, 1, 1), -1.5), np.zeros((n, 1, 1, 1)))
    sewn = rough_integral(z, lift, 0.37, check=False)
    assert np.allclose(sewn.limit[:, 0], -1.5 * x.values[:, 0], atol=1e-12)


def test_rough_sine_integrand_against_dense_riemann():
    x = refine(sample_fbm(FbmConfig(0.4, levels=6, seed=5)), 12)
    lift = lift_piecewise_linear(x)
    z = function_controlled(np.sin, lambda v: np.cos(v)[..., None], x)
    sewn = rough_integral(z, lift, 0.37, levels=range(6, 13))
    dense = refine(x, 14).values[:, 0]
    mid = 0.5 * (dense[1:] + dense[:-1])
    oracle = np.sum(np.sin(mid) * np.diff(dense))
    assert abs(sewn.value[0] - oracle) < 1e-5 * abs(oracle)


def test_young_and_rough_agree_on_smooth_proxy():
    x = pl_sample(0.7, seed=7)
    young = young_integral(x, x, levels=range(6, 13), alpha=0.65, beta=0.65)
    rough = rough_integral(identity_controlled(x), lift_piecewise_linear(x), 0.45, levels=range(6, 13))
    assert abs(young.value[0] - rough.value[0]) < 1e-8


def test_linearity():
    x = pl_sample(0.7, seed=9, fine=11)
    z1 = SampledPath(x.times, np.cos(x.values))
    z2 = SampledPath(x.times, x.values ** 2)
    zc = SampledPath(x.times, 2.0 * z1.values - 3.0 * z2.values)
    kw = dict(levels=range(5, 12), alpha=0.65, beta=0.65)
    lhs = young_integral(zc, x, **kw).finest
    rhs = 2.0 * young_integral(z1, x, **kw).finest - 3.0 * young_integral(z2, x, **kw).finest
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_cauchy_gaps_contract():
    raw = sample_fbm(FbmConfig(0.7, levels=12, seed=4))
    z = SampledPath(raw.times, np.cos(raw.values))
    sewn = young_integral(z, raw, levels=range(4, 13), alpha=0.6, beta=0.6)
    assert sewn.report.contraction_slope >= 0.6 + 0.6 - 1 - 0.1
    assert sewn.report.cauchy[-1] < sewn.report.cauchy[0]


def test_precondition_violation_raises():
    times = dyadic_times(1.0, 10)
    rng = np.random.default_rng(0)
    noise = np.cumsum(rng.standard_normal(len(times))) * 2 ** -5
    white = rng.standard_normal(len(times))
    z = SampledPath(times, white)
    x = SampledPath(times, noise)
    with pytest.raises(SewingPreconditionError):
        young_integral(z, x, alpha=0.3, beta=0.3)
    germ = young_germ(z, x, 0.3, 0.3)
    assert defect_slope(germ) < 1.0
    with pytest.raises(SewingPreconditionError):
        sew(germ)


def test_rough_alpha_floor():
    x = pl_sample(0.4, fine=8)
    with pytest.raises(SewingPreconditionError):
        rough_integral(identity_controlled(x), lift_piecewise_linear(x), 0.3)


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_affine_integrand_closed_form(a, b, seed):
    x = pl_sample(0.7, level=5, seed=seed, fine=9)
    z = SampledPath(x.times, a + b * x.values)
    sewn = young_integral(z, x, levels=range(5, 10), alpha=0.65, beta=0.65)
    xt = x.values[-1, 0]
    assert sewn.value[0] == pytest.approx(a * xt + 0.5 * b * xt ** 2, abs=1e-9)
