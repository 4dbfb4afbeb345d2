"""Nilpotent matrix families, iterated simplex integrals and the CBHD logarithm.

Integrands are kept in separable form: every generator is written as
``A_j(t) = sum_k phi_jk(t) E_k`` with constant basis matrices ``E_k`` and
scalar coefficient functions. A nested commutator of generators at
distinct times is then a finite sum of constant matrices times products of
one-variable functions, and the simplex integrals reduce to scalar
iterated integrals computed by a memoised recursion.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import legendre
from scipy.linalg import expm

from .fbm import SampledPath
from .lift import Level2Lift, word_integral

QUAD_NODES = 8


@dataclass(frozen=True)
class ScalarFunction:
    """Vectorised scalar function of time with its derivative."""

    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    label: str = ""
    constant: float | None = None

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(self.value(t), dtype=float), t.shape)

    def d(self, t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(self.derivative(t), dtype=float), t.shape)

    @classmethod
    def const(cls, c: float) -> "ScalarFunction":
        c = float(c)
        return cls(lambda t: np.full(np.shape(t), c), lambda t: np.zeros(np.shape(t)), repr(c), c)


class NilpotencyError(ValueError):
    pass


@dataclass
class MatrixFamily:
    """Generators ``A_j(t) = sum_k coefficients[j][k](t) basis[k]``.

    ``coefficients[j][k]`` may be ``None`` for an identically zero entry.
    ``nilpotency`` is the step ``N0``: commutators nested ``N0 + 1`` deep vanish.
    """

    basis: np.ndarray
    coefficients: list[list[ScalarFunction | None]]
    nilpotency: int
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=float)
        if self.basis.ndim != 3 or self.basis.shape[1] != self.basis.shape[2]:
            raise ValueError("basis must have shape (K, n, n)")
        for row in self.coefficients:
            if len(row) != self.basis.shape[0]:
                raise ValueError("each generator needs one coefficient per basis matrix")
        if self.nilpotency < 1:
            raise ValueError("nilpotency step must be at least 1")

    @property
    def count(self) -> int:
        return len(self.coefficients)

    @property
    def size(self) -> int:
        return self.basis.shape[1]

    @property
    def is_constant(self) -> bool:
        return all(c is None or c.constant is not None for row in self.coefficients for c in row)

    @classmethod
    def constant(cls, matrices: Sequence[np.ndarray], nilpotency: int) -> "MatrixFamily":
        mats = np.asarray(matrices, dtype=float)
        m = mats.shape[0]
        coeffs = [[ScalarFunction.const(1.0) if j == k else None for k in range(m)] for j in range(m)]
        return cls(mats, coeffs, nilpotency)

    @classmethod
    def zero(cls, size: int, count: int = 0) -> "MatrixFamily":
        basis = np.zeros((1, size, size))
        return cls(basis, [[None] for _ in range(count)], 1)

    def evaluate(self, j: int, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros(t.shape + self.basis.shape[1:])
        for k, c in enumerate(self.coefficients[j]):
            if c is not None:
                out += c(t)[..., None, None] * self.basis[k]
        return out

    def derivative(self, j: int, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros(t.shape + self.basis.shape[1:])
        for k, c in enumerate(self.coefficients[j]):
            if c is not None:
                out += c.d(t)[..., None, None] * self.basis[k]
        return out

    def combination(self, t, weights) -> np.ndarray:
        """``sum_j weights[..., j] * A_j(t)`` with ``weights`` broadcasting against ``t``."""
        t = np.asarray(t, dtype=float)
        weights = np.asarray(weights, dtype=float)
        out = 0.0
        for j in range(self.count):
            out = out + weights[..., j, None, None] * self.evaluate(j, t).reshape(
                t.shape + self.basis.shape[1:])
        return out


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def nest(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Left-nested commutator ``[[...[M_1, M_2], ...], M_n]``."""
    out = mats[0]
    for m in mats[1:]:
        out = commutator(out, m)
    return out


def nested_commutator(family: MatrixFamily, indices: Sequence[int], times: Sequence[float]) -> np.ndarray:
    if len(indices) != len(times):
        raise ValueError("one time per index is required")
    return nest([family.evaluate(i, t)[0] for i, t in zip(indices, times)])


@dataclass
class NilpotencyReport:
    ok: bool
    defect: float
    tuples_checked: int


def verify_nilpotent(family: MatrixFamily, samples: int = 16, seed: int = 0,
                     horizon: float = 1.0, tol: float = 1e-12) -> NilpotencyReport:
    """Check that all commutators nested ``N0 + 1`` deep vanish.

    Index tuples are enumerated exhaustively; times are drawn at random
    unless the family is constant.
    """
    rng = np.random.default_rng(seed)
    depth = family.nilpotency + 1
    scale = max(1.0, float(np.abs(family.basis).max()))
    worst = 0.0
    checked = 0
    draws = 1 if family.is_constant else samples
    for idx in itertools.product(range(family.count), repeat=depth):
        for _ in range(draws):
            times = rng.uniform(0.0, horizon, size=depth)
            worst = max(worst, float(np.abs(nested_commutator(family, idx, times)).max()))
            checked += 1
    return NilpotencyReport(worst <= tol * scale ** depth, worst, checked)


def descent_number(perm: Sequence[int]) -> int:
    perm = list(perm)
    if sorted(perm) == list(range(1, len(perm) + 1)) or sorted(perm) == list(range(len(perm))):
        return sum(1 for a, b in zip(perm, perm[1:]) if a > b)
    raise ValueError(f"{perm} is not a permutation")


def cbhd_coefficient_exact(n: int, descents: int) -> Fraction:
    if not 0 <= descents < n:
        raise ValueError("descent count must lie in [0, n-1]")
    return Fraction((-1) ** (descents + n), n * n * comb(n - 1, descents))


def cbhd_coefficient(n: int, descents: int) -> float:
    return float(cbhd_coefficient_exact(n, descents))


# --- quadrature -----------------------------------------------------------


def _spectral_matrix(q: int):
    x, w = legendre.leggauss(q)
    inv_vander = np.linalg.inv(legendre.legvander(x, q - 1))
    integ = legendre.legint(inv_vander, lbnd=-1)
    return x, w, legendre.legval(x, integ).T


_X, _W, _SPEC = _spectral_matrix(QUAD_NODES)


class Segments:
    """Gauss-Legendre collocation on consecutive segments between ``breaks``."""

    def __init__(self, breaks: np.ndarray):
        self.breaks = np.asarray(breaks, dtype=float)
        left, right = self.breaks[:-1], self.breaks[1:]
        self.half = 0.5 * (right - left)
        self.nodes = (0.5 * (left + right))[:, None] + self.half[:, None] * _X[None, :]
        self.weights = self.half[:, None] * _W[None, :]

    def cumulative(self, g: np.ndarray):
        """Running integral of ``g`` (values at nodes, shape ``(..., S, q)``).

        Returns the integral at the nodes and at the breaks.
        """
        seg = np.sum(g * self.weights, axis=-1)
        at_breaks = np.concatenate([np.zeros(seg.shape[:-1] + (1,)), np.cumsum(seg, axis=-1)], axis=-1)
        at_nodes = at_breaks[..., :-1, None] + (g @ _SPEC.T) * self.half[:, None]
        return at_nodes, at_breaks


def _breaks_for(times: np.ndarray, t: float | None):
    if t is None or t >= times[-1] - 1e-15:
        return times.copy(), len(times) - 1
    if t < 0:
        raise ValueError("t must be non-negative")
    inner = times[times < t]
    return np.append(inner, t), len(inner)


# --- scalar iterated integrals --------------------------------------------

Slot = tuple  # (ScalarFunction, driver index)


class _PlIntegrator:
    """Iterated integrals of products of scalar functions against a piecewise-linear driver."""

    def __init__(self, driver: SampledPath, t: float | None = None):
        breaks, _ = _breaks_for(driver.times, t)
        self.seg = Segments(breaks)
        n_seg = len(breaks) - 1
        dt = driver.times[1] - driver.times[0]
        self.slopes = driver.increments()[:n_seg] / dt
        self._memo: dict = {}

    def integrate(self, slots: Sequence[Slot]) -> np.ndarray:
        """Values at every break of ``int_{s_1<...<s_n<.} prod phi_p(s_p) dB^{i_p}(s_p)``."""
        return self._prefix(tuple(slots))[1]

    def _prefix(self, slots):
        if not slots:
            shape = self.seg.nodes.shape
            return np.ones(shape), np.ones(shape[0] + 1)
        if slots in self._memo:
            return self._memo[slots]
        nodes_prev, _ = self._prefix(slots[:-1])
        func, idx = slots[-1]
        g = nodes_prev * func(self.seg.nodes) * self.slopes[:, idx, None]
        out = self.seg.cumulative(g)
        self._memo[slots] = out
        return out


class _RoughIntegrator:
    """Same iterated integrals computed from the lift through integration by parts.

    ``J_{p-1}`` is carried as ``sum_a h_a X_{w_a}`` with ``h_a`` of class C^1
    and ``X_w`` iterated integrals of the driver from the origin. One step
    uses ``int h phi X_w dX^i = (h phi) X_{wi} - int (h phi)' X_{wi} dr``,
    so only dt-integrals are ever discretised.
    """

    def __init__(self, lift: Level2Lift, t: float | None = None, path: SampledPath | None = None):
        breaks, _ = _breaks_for(lift.times, t)
        self.seg = Segments(breaks)
        self.lift = lift
        self.path = path
        self._words: dict = {}
        self._memo: dict = {}

    def _word(self, word):
        if word in self._words:
            return self._words[word]
        nodes = self.seg.nodes.ravel()
        if len(word) <= 2:
            f_nodes, s_nodes = self.lift.from_origin(nodes)
            f_br, s_br = self.lift.from_origin(self.seg.breaks)
            if len(word) == 1:
                vals = f_nodes[:, word[0]], f_br[:, word[0]]
            else:
                vals = s_nodes[:, word[0], word[1]], s_br[:, word[0], word[1]]
        else:
            if self.path is None:
                raise ValueError("words longer than two need the piecewise-linear driver")
            vals = word_integral(self.path, word, nodes), word_integral(self.path, word, self.seg.breaks)
        out = vals[0].reshape(self.seg.nodes.shape), vals[1]
        self._words[word] = out
        return out

    def integrate(self, slots: Sequence[Slot]) -> np.ndarray:
        terms = self._terms(tuple(slots))
        total = np.zeros(len(self.seg.breaks))
        for word, (_, hb, _) in terms.items():
            total += hb * (self._word(word)[1] if word else 1.0)
        return total

    def _terms(self, slots):
        if not slots:
            shape = self.seg.nodes.shape
            return {(): (np.ones(shape), np.ones(shape[0] + 1), np.zeros(shape))}
        if slots in self._memo:
            return self._memo[slots]
        prev = self._terms(slots[:-1])
        func, idx = slots[-1]
        nodes, breaks = self.seg.nodes, self.seg.breaks
        phi_n, phi_b, dphi_n = func(nodes), func(breaks), func.d(nodes)
        out: dict = {}

        def add(word, hn, hb, dhn):
            if word in out:
                a = out[word]
                out[word] = (a[0] + hn, a[1] + hb, a[2] + dhn)
            else:
                out[word] = (hn, hb, dhn)

        for word, (hn, hb, dhn) in prev.items():
            w2 = word + (idx,)
            gn, gb, dgn = hn * phi_n, hb * phi_b, dhn * phi_n + hn * dphi_n
            add(w2, gn, gb, dgn)
            integrand = dgn * self._word(w2)[0]
            g_nodes, g_breaks = self.seg.cumulative(integrand)
            add((), -g_nodes, -g_breaks, -integrand)
        self._memo[slots] = out
        return out


# --- separable kernels ------------------------------------------------------


@dataclass
class SeparableKernel:
    """``f(s_1, ..., s_n) = sum_r C_r prod_p phi_{r,p}(s_p)`` with constant matrices ``C_r``."""

    terms: list[tuple[np.ndarray, tuple[ScalarFunction, ...]]]

    @property
    def order(self) -> int:
        return len(self.terms[0][1]) if self.terms else 0

    def __call__(self, *times) -> np.ndarray:
        out = 0.0
        for mat, funcs in self.terms:
            out = out + mat * np.prod([f(np.asarray(s, dtype=float)) for f, s in zip(funcs, times)])
        return out


def commutator_kernel(family: MatrixFamily, indices: Sequence[int],
                      order: Sequence[int] | None = None) -> SeparableKernel:
    """Kernel of ``[[A_{i_{o_1}}(s_{o_1}), A_{i_{o_2}}(s_{o_2})], ...]`` as a separable sum.

    ``order`` lists 0-based slot positions (defaults to the identity).
    """
    n = len(indices)
    order = list(range(n)) if order is None else list(order)
    nonzero = [[k for k, c in enumerate(family.coefficients[i]) if c is not None] for i in indices]
    terms = []
    for ks in itertools.product(*nonzero):
        mat = nest([family.basis[ks[o]] for o in order])
        if np.any(mat):
            funcs = tuple(family.coefficients[i][k] for i, k in zip(indices, ks))
            terms.append((mat, funcs))
    return SeparableKernel(terms)


def _apply_kernel(kernel: SeparableKernel, indices, integrator) -> np.ndarray:
    n = len(integrator.seg.breaks)
    size = kernel.terms[0][0].shape if kernel.terms else (1, 1)
    out = np.zeros((n,) + size)
    for mat, funcs in kernel.terms:
        out += integrator.integrate(list(zip(funcs, indices)))[:, None, None] * mat
    return out


def multiple_integral_pl(kernel: SeparableKernel, driver: SampledPath, indices: Sequence[int],
                         t: float | None = None) -> np.ndarray:
    """Simplex integral against the piecewise-linear driver, using its derivative."""
    return _apply_kernel(kernel, indices, _PlIntegrator(driver, t))[-1]


def multiple_integral_rough(kernel: SeparableKernel, lift: Level2Lift, indices: Sequence[int],
                            t: float | None = None, path: SampledPath | None = None) -> np.ndarray:
    """Simplex integral from the lift by integration by parts; never uses the derivative.

    Orders above two need the driver's own iterated integrals (``path``).
    """
    return _apply_kernel(kernel, indices, _RoughIntegrator(lift, t, path))[-1]


# --- CBHD series --------------------------------------------------------------


@dataclass
class CbhdTerm:
    order: int
    indices: tuple[int, ...]
    permutation: tuple[int, ...]
    coefficient: float
    integral: np.ndarray


@dataclass
class CbhdSeries:
    t: float
    terms: list[CbhdTerm]
    log: np.ndarray

    def by_order(self) -> dict[int, np.ndarray]:
        out: dict[int, np.ndarray] = {}
        for term in self.terms:
            out[term.order] = out.get(term.order, 0.0) + term.coefficient * term.integral
        return out


def _make_integrator(driver, route, t, lift=None):
    if route == "pl":
        return _PlIntegrator(driver, t)
    if route == "rough":
        from .lift import lift_piecewise_linear
        return _RoughIntegrator(lift or lift_piecewise_linear(driver), t, driver)
    raise ValueError(f"unknown route {route!r}")


def _permutation_matrices(family: MatrixFamily, n: int, ks: tuple[int, ...]):
    """``sum_sigma c(sigma) nest(E_{k_sigma(1)}, ..., E_{k_sigma(n)})``."""
    total = np.zeros(family.basis.shape[1:])
    for perm in itertools.permutations(range(n)):
        mat = nest([family.basis[ks[p]] for p in perm])
        if np.any(mat):
            total += cbhd_coefficient(n, descent_number(perm)) * mat
    return total


def cbhd_path(family: MatrixFamily, driver: SampledPath, t: float | None = None,
              route: str = "pl", max_order: int | None = None, lift: Level2Lift | None = None):
    """Truncated CBHD logarithm at every break up to ``t`` (all grid times by default).

    Returns ``(breaks, K)`` with ``K`` of shape ``(len(breaks), n, n)``.
    """
    if driver.dimension != family.count:
        raise ValueError(f"driver has {driver.dimension} components, family has {family.count}")
    order = family.nilpotency if max_order is None else min(max_order, family.nilpotency)
    integ = _make_integrator(driver, route, t, lift)
    breaks = integ.seg.breaks
    out = np.zeros((len(breaks),) + family.basis.shape[1:])
    slots = [(i, k) for i in range(family.count)
             for k, c in enumerate(family.coefficients[i]) if c is not None]
    cache: dict = {}
    for n in range(1, order + 1):
        for seq in itertools.product(slots, repeat=n):
            ks = tuple(k for _, k in seq)
            if ks not in cache:
                cache[ks] = _permutation_matrices(family, n, ks)
            mat = cache[ks]
            if not np.any(mat):
                continue
            funcs = [(family.coefficients[i][k], i) for i, k in seq]
            out += integ.integrate(funcs)[:, None, None] * mat
    return breaks, out


def cbhd_log(family: MatrixFamily, driver: SampledPath, t: float | None = None,
             route: str = "pl", max_order: int | None = None) -> CbhdSeries:
    """Truncated CBHD series at ``t`` with every (order, indices, permutation) term."""
    if driver.dimension != family.count:
        raise ValueError(f"driver has {driver.dimension} components, family has {family.count}")
    order = family.nilpotency if max_order is None else min(max_order, family.nilpotency)
    integ = _make_integrator(driver, route, t)
    t_end = float(integ.seg.breaks[-1])
    terms = []
    log = np.zeros(family.basis.shape[1:])
    for n in range(1, order + 1):
        for idx in itertools.product(range(family.count), repeat=n):
            for perm in itertools.permutations(range(n)):
                kernel = commutator_kernel(family, idx, perm)
                if not kernel.terms:
                    continue
                value = _apply_kernel(kernel, idx, integ)[-1]
                coef = cbhd_coefficient(n, descent_number(perm))
                terms.append(CbhdTerm(n, idx, tuple(p + 1 for p in perm), coef, value))
                log = log + coef * value
    return CbhdSeries(t_end, terms, log)


def matrix_exp(m: np.ndarray, nilpotency: int | None = None) -> np.ndarray:
    """Matrix exponential, batched over leading axes.

    With a nilpotency hint ``N`` and ``M^{N+1} = 0`` numerically, the exact
    finite sum ``I + M + ... + M^N / N!`` is used; otherwise scaling and squaring.
    """
    m = np.asarray(m, dtype=float)
    eye = np.eye(m.shape[-1])
    if nilpotency is not None:
        power = np.broadcast_to(eye, m.shape).copy()
        total = power.copy()
        for k in range(1, nilpotency + 1):
            power = power @ m / k
            total += power
        tail = power @ m
        scale = max(1.0, float(np.abs(m).max())) ** (nilpotency + 1)
        if np.abs(tail).max() <= 1e-13 * scale:
            return total
    if m.ndim == 2:
        return expm(m)
    flat = m.reshape(-1, m.shape[-2], m.shape[-1])
    return np.stack([expm(a) for a in flat]).reshape(m.shape)
