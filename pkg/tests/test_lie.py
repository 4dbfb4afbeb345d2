import itertools
from fractions import Fraction
from math import comb, factorial

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fbm_control.fbm import FbmConfig, SampledPath, dyadic_approx, refine, sample_fbm
from fbm_control.lie import (MatrixFamily, ScalarFunction, SeparableKernel, cbhd_coefficient_exact, cbhd_log,
                             cbhd_path, commutator, commutator_kernel, descent_number, matrix_exp,
                             multiple_integral_pl, multiple_integral_rough, nested_commutator,
                             verify_nilpotent)
from fbm_control.lift import lift_piecewise_linear
from fbm_control.system import load_system
from fbm_control.transform import solve_gamma_direct


def E(i, j, n=3):
    m = np.zeros((n, n))
    m[i - 1, j - 1] = 1.0
    return m


def e12e23():
    return load_system("nilpotent_e12e23").A


def driver(hurst, dim=2, level=8, seed=0):
    return sample_fbm(FbmConfig(hurst, dim, levels=level, seed=seed))


def sine():
    return ScalarFunction(lambda t: np.sin(3 * t), lambda t: 3 * np.cos(3 * t), "sin3t")


def test_nested_commutator_examples():
    fam = MatrixFamily.constant([E(1, 2), E(2, 3)], 2)
    assert np.array_equal(nested_commutator(fam, [0], [0.3]), E(1, 2))
    assert np.array_equal(nested_commutator(fam, [0, 1], [0.1, 0.7]), E(1, 3))
    base = np.array([[1.0, 2.0], [0.0, -1.0]])
    comm = MatrixFamily.constant([base, -0.5 * base], 1)
    assert not np.any(nested_commutator(comm, [0, 1, 0], [0.1, 0.2, 0.3]))


def test_verify_nilpotent():
    upper = MatrixFamily.constant([np.triu(np.ones((4, 4)), 1), E(1, 3, 4) + E(2, 4, 4)], 3)
    assert verify_nilpotent(upper).ok
    bad = MatrixFamily.constant([E(1, 2, 2), E(2, 1, 2)], 1)
    assert not verify_nilpotent(bad).ok
    rep = verify_nilpotent(e12e23())
    assert rep.ok and rep.defect < 1e-14


def test_descent_number():
    assert descent_number([1, 2, 3, 4]) == 0
    assert descent_number([5, 4, 3, 2, 1]) == 4
    assert descent_number([2, 1, 3]) == 1
    with pytest.raises(ValueError):
        descent_number([1, 1, 2])


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_coefficient_table(n):
    table = {}
    for perm in itertools.permutations(range(1, n + 1)):
        e = descent_number(perm)
        table.setdefault(e, set()).add(cbhd_coefficient_exact(n, e))
    for e, coefs in table.items():
        assert coefs == {Fraction((-1) ** (e + n), n * n * comb(n - 1, e))}
    # Eulerian numbers count permutations per descent class
    counts = [sum(1 for p in itertools.permutations(range(n)) if descent_number(p) == e) for e in range(n)]
    eulerian = [sum((-1) ** k * comb(n + 1, k) * (e + 1 - k) ** n for k in range(e + 2)) for e in range(n)]
    assert counts == eulerian


def test_matrix_exp_examples(rng):
    assert np.array_equal(matrix_exp(np.zeros((3, 3)), 2), np.eye(3))
    assert np.array_equal(matrix_exp(E(1, 2), 1), np.eye(3) + E(1, 2))
    m = rng.standard_normal((4, 4)) * 0.5
    taylor, term = np.eye(4), np.eye(4)
    for k in range(1, 40):
        term = term @ m / k
        taylor = taylor + term
    assert np.abs(matrix_exp(m) - taylor).max() < 1e-13 * np.abs(taylor).max()


def test_pl_integral_low_orders():
    path = driver(0.7, dim=1, seed=1)
    one = ScalarFunction.const(1.0)
    k1 = SeparableKernel([(np.eye(1), (one,))])
    k2 = SeparableKernel([(np.eye(1), (one, one))])
    bt = path.values[-1, 0]
    assert multiple_integral_pl(k1, path, [0])[0, 0] == pytest.approx(bt, abs=1e-12)
    assert abs(multiple_integral_pl(k2, path, [0, 0])[0, 0] - 0.5 * bt ** 2) < 1e-10


def _midpoint_simplex(kernel, path, indices, level):
    """Brute-force midpoint double sum over s1 < s2, diagonal cells counted half."""
    fine = refine(path, level)
    inc = np.diff(fine.values, axis=0)
    mid = 0.5 * (fine.times[1:] + fine.times[:-1])
    total = 0.0
    for mat, (f1, f2) in kernel.terms:
        a = f1(mid) * inc[:, indices[0]]
        b = f2(mid) * inc[:, indices[1]]
        below = np.concatenate([[0.0], np.cumsum(a)[:-1]])
        total = total + mat * np.sum(b * (below + 0.5 * a))
    return total


def test_pl_double_integral_against_riemann():
    fam = e12e23()
    path = driver(0.7, seed=2)
    kernel = commutator_kernel(fam, [0, 1])
    value = multiple_integral_pl(kernel, path, [0, 1])
    s11 = _midpoint_simplex(kernel, path, [0, 1], 11)
    s12 = _midpoint_simplex(kernel, path, [0, 1], 12)
    oracle = (4 * s12 - s11) / 3
    assert np.abs(value - oracle).max() < 1e-8


def test_rough_first_order_is_integration_by_parts():
    path = driver(0.4, dim=1, seed=3)
    lift = lift_piecewise_linear(path)
    c = ScalarFunction.const(2.0)
    k = SeparableKernel([(np.eye(1), (c,))])
    t = 0.6
    assert multiple_integral_rough(k, lift, [0], t)[0, 0] == pytest.approx(2.0 * path.at(t)[0, 0], abs=1e-12)
    f = sine()
    k = SeparableKernel([(np.eye(1), (f,))])
    fine = refine(path, 14)
    mid = 0.5 * (fine.times[1:] + fine.times[:-1])
    b_mid = 0.5 * (fine.values[1:, 0] + fine.values[:-1, 0])
    ibp = f(1.0) * path.values[-1, 0] - np.sum(f.d(mid) * b_mid * np.diff(fine.times))
    assert multiple_integral_rough(k, lift, [0])[0, 0] == pytest.approx(ibp, abs=1e-7)


@pytest.mark.parametrize("indices", [[0], [1], [0, 1], [1, 0], [0, 0], [1, 1, 0], [0, 1, 1], [0, 0, 0]])
@pytest.mark.parametrize("hurst", [0.4, 0.7])
def test_routes_agree(indices, hurst):
    path = driver(hurst, seed=4)
    lift = lift_piecewise_linear(path)
    f, one = sine(), ScalarFunction.const(1.0)
    g = ScalarFunction(lambda t: 1 + t ** 2, lambda t: 2 * t, "1+t^2")
    funcs = (f, g, one)[: len(indices)]
    kernel = SeparableKernel([(np.eye(2), funcs)])
    pl = multiple_integral_pl(kernel, path, indices, t=0.8)
    rough = multiple_integral_rough(kernel, lift, indices, t=0.8, path=path)
    tol = 1e-8 if len(indices) <= 2 else 1e-6
    assert np.abs(pl - rough).max() < tol


def test_zero_family():
    fam = MatrixFamily.zero(3, 2)
    _, K = cbhd_path(fam, driver(0.7))
    assert not np.any(K)
    assert np.array_equal(matrix_exp(K[-1], 1), np.eye(3))


@pytest.mark.parametrize("hurst", [0.4, 0.7])
def test_single_generator_sign(hurst):
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    fam = MatrixFamily.constant([A], 1)
    path = driver(hurst, dim=1, seed=5)
    _, K = cbhd_path(fam, path)
    assert np.allclose(K, -path.values[:, 0, None, None] * A, atol=1e-12)
    direct = solve_gamma_direct(fam, path, substeps=8).values
    assert np.abs(matrix_exp(K, 1) - direct).max() < 1e-10


def test_commuting_collapse():
    fam = load_system("commuting").A
    path = driver(0.7, seed=6)
    _, K = cbhd_path(fam, path)
    gens = np.stack([fam.evaluate(j, 0.0)[0] for j in range(fam.count)])
    expected = -np.einsum("tj,jab->tab", path.values, gens)
    assert np.abs(K - expected).max() < 1e-12
    direct = solve_gamma_direct(fam, path, substeps=8).values
    assert np.abs(matrix_exp(K, fam.nilpotency) - direct).max() < 1e-10


def test_two_segment_bch():
    # constant generators on a two-segment path give exp(-M1) exp(-M2); step-2 nilpotent BCH is exact
    fam = MatrixFamily.constant([E(1, 2), E(2, 3)], 2)
    path = SampledPath([0.0, 0.5, 1.0], [[0.0, 0.0], [0.7, -0.4], [0.1, 1.3]])
    m1 = 0.7 * E(1, 2) - 0.4 * E(2, 3)
    m2 = (0.1 - 0.7) * E(1, 2) + (1.3 + 0.4) * E(2, 3)
    bch = -m1 - m2 + 0.5 * commutator(m1, m2)
    assert np.abs(cbhd_log(fam, path).log - bch).max() < 1e-13
    assert np.abs(matrix_exp(bch, 2) - matrix_exp(-m1, 2) @ matrix_exp(-m2, 2)).max() < 1e-13


@pytest.mark.parametrize("hurst", [0.4, 0.7])
def test_e12e23_against_ode(hurst):
    fam = e12e23()
    path = driver(hurst, seed=7)
    _, K = cbhd_path(fam, path)
    direct = solve_gamma_direct(fam, path, substeps=16).values[-1]
    rel = np.linalg.norm(matrix_exp(K[-1], 2) - direct) / np.linalg.norm(direct)
    assert rel < 1e-8


def test_series_terms_sum_to_log():
    fam = e12e23()
    path = driver(0.7, seed=8)
    series = cbhd_log(fam, path, t=0.75)
    _, K = cbhd_path(fam, path, t=0.75)
    assert np.allclose(series.log, K[-1], atol=1e-13)
    assert sum(series.by_order().values()) == pytest.approx(series.log, abs=1e-13)
    assert {t.order for t in series.terms} == {1, 2}


def test_truncation_is_exact():
    fam = e12e23()
    for idx in itertools.product(range(2), repeat=3):
        for perm in itertools.permutations(range(3)):
            assert not commutator_kernel(fam, idx, perm).terms


@pytest.mark.parametrize("hurst", [0.4, 0.7])
def test_log_converges_across_levels(hurst):
    fam = e12e23()
    path = driver(hurst, level=11, seed=9)
    logs = [cbhd_path(fam, dyadic_approx(path, k), t=None)[1][-1] for k in range(3, 12)]
    gaps = np.array([np.linalg.norm(b - a) for a, b in zip(logs, logs[1:])])
    slope = np.polyfit(np.arange(len(gaps)), np.log2(gaps), 1)[0]
    assert slope < -0.2
    assert gaps[-1] < gaps[0] / 4


@given(coeffs=st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_nilpotent_exp_inverse(coeffs):
    m = coeffs[0] * E(1, 2) + coeffs[1] * E(2, 3) + coeffs[2] * E(1, 3)
    prod = matrix_exp(m, 2) @ matrix_exp(-m, 2)
    assert np.abs(prod - np.eye(3)).max() < 1e-12
    assert np.linalg.det(matrix_exp(m, 2)) == pytest.approx(1.0, abs=1e-12)


@given(perm=st.permutations(list(range(1, 7))))
def test_descents_of_reversal(perm):
    n = len(perm)
    assert descent_number(perm) + descent_number(perm[::-1]) == n - 1
