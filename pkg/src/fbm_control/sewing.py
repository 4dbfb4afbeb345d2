"""Sewing of two-parameter germs by compensated Riemann sums on dyadic grids."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fbm import SampledPath, holder_exponent, refine
from .lift import Level2Lift


class SewingPreconditionError(ValueError):
    """The germ's defect does not vanish faster than linearly."""


@dataclass
class Germ:
    """Two-parameter germ ``A(s, t)`` evaluated on grid indices.

    ``evaluate(i, j)`` receives integer index arrays of equal length into
    ``times`` and returns an array of shape ``(len(i), dim)``.
    """

    evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray]
    times: np.ndarray
    alpha: float
    beta: float

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def level(self) -> int:
        return int(np.log2(self.n_steps))

    def defect(self, s, u, t) -> np.ndarray:
        return self.evaluate(s, t) - self.evaluate(s, u) - self.evaluate(u, t)


@dataclass
class SewingReport:
    levels: list[int]
    values_at_T: np.ndarray          # (len(levels), dim)
    cauchy: np.ndarray               # sup-norm gaps between successive levels
    contraction_slope: float         # fitted log2 decay of the Cauchy gaps
    contraction_ratio: float
    geometric: bool
    defect_slope: float
    limit_at_T: np.ndarray
    extra: dict = field(default_factory=dict)


@dataclass
class SewnPath:
    times: np.ndarray
    finest: np.ndarray       # compensated sum at the finest level, (N+1, dim)
    limit: np.ndarray        # extrapolated limit, (N+1, dim)
    report: SewingReport

    @property
    def value(self) -> np.ndarray:
        return self.limit[-1]


def _riemann_path(germ: Germ, level: int) -> np.ndarray:
    """Sum of ``A(u, v ^ t)`` over the level partition, for every grid time t."""
    n = germ.n_steps
    stride = n // 2 ** level
    left = np.arange(0, n, stride)
    full = germ.evaluate(left, left + stride)
    coarse = np.concatenate([np.zeros((1, full.shape[1])), np.cumsum(full, axis=0)])
    idx = np.arange(n + 1)
    base = (idx // stride) * stride
    base[-1] = n
    out = coarse[base // stride].copy()
    inside = idx != base
    if np.any(inside):
        out[inside] += germ.evaluate(base[inside], idx[inside])
    return out


def defect_slope(germ: Germ, n_triples: int = 500, seed: int = 0) -> float:
    """Exponent fitted to the germ defect over random grid triples.

    Triples are drawn at random positions and dyadic scales; the per-scale
    maximum of the defect is regressed on the scale in log-log coordinates.
    Returns ``inf`` for additive germs.
    """
    rng = np.random.default_rng(seed)
    n = germ.n_steps
    top = germ.level
    scales = np.arange(1, min(top, 8) + 1)
    per_scale = max(n_triples // len(scales), 1)
    xs, ys = [], []
    for j in scales:
        width = 2 ** j
        s = rng.integers(0, n - width + 1, size=per_scale)
        u = s + rng.integers(1, width, size=per_scale)
        t = s + width
        d = np.abs(germ.defect(s, u, t)).max()
        scale_d = np.max(np.abs(germ.evaluate(s, t)))
        if d <= 1e-13 * max(scale_d, 1e-300):
            continue
        xs.append(np.log(width * (germ.times[1] - germ.times[0])))
        ys.append(np.log(d))
    if len(xs) < 2:
        return float("inf")
    return float(np.polyfit(xs, ys, 1)[0])


def sew(germ: Germ, levels: Sequence[int] | None = None, check: bool = True,
        tolerance: float = 0.0, seed: int = 0) -> SewnPath:
    """Compensated Riemann sums on successive dyadic levels.

    The finest level path is returned together with a Richardson-type limit
    built from the two finest levels and the observed contraction ratio.
    """
    levels = list(levels) if levels is not None else list(range(max(germ.level - 6, 0), germ.level + 1))
    if max(levels) > germ.level:
        raise ValueError(f"level {max(levels)} exceeds the germ grid level {germ.level}")
    slope = defect_slope(germ, seed=seed)
    if check and slope < 1.0 + tolerance:
        raise SewingPreconditionError(f"defect exponent {slope:.3f} does not exceed 1")
    paths = [_riemann_path(germ, k) for k in levels]
    gaps = np.array([np.abs(b - a).max() for a, b in zip(paths[:-1], paths[1:])])
    fit_gaps = gaps[-4:]
    positive = fit_gaps > 1e-300
    if positive.sum() >= 2:
        xs = np.array(levels[1:][-4:])[positive]
        c_slope = float(-np.polyfit(xs, np.log2(fit_gaps[positive]), 1)[0])
    else:
        c_slope = float("inf")
    ratio = float(gaps[-1] / gaps[-2]) if len(gaps) >= 2 and gaps[-2] > 0 else 0.0
    geometric = bool(len(gaps) < 3 or np.all(gaps[1:] <= gaps[:-1] * (1 + 1e-9) + 1e-15))
    finest = paths[-1]
    if len(paths) >= 2 and 0.0 < ratio < 0.95:
        limit = finest + ratio / (1.0 - ratio) * (finest - paths[-2])
    else:
        limit = finest
    report = SewingReport(
        levels=levels,
        values_at_T=np.array([p[-1] for p in paths]),
        cauchy=gaps,
        contraction_slope=c_slope,
        contraction_ratio=ratio,
        geometric=geometric,
        defect_slope=slope,
        limit_at_T=limit[-1],
    )
    return SewnPath(germ.times, finest, limit, report)


def local_bound_slope(sewn: SewnPath, germ: Germ, levels: int = 4) -> float:
    """Fitted exponent of ``sup |I_t - I_s - A(s, t)|`` against ``t - s`` on the finest scales."""
    n = germ.n_steps
    xs, ys = [], []
    for j in range(levels):
        width = 2 ** j
        s = np.arange(0, n - width + 1)
        t = s + width
        r = np.abs(sewn.limit[t] - sewn.limit[s] - germ.evaluate(s, t)).max()
        if r > 0:
            xs.append(np.log(width * (germ.times[1] - germ.times[0])))
            ys.append(np.log(r))
    if len(xs) < 2:
        return float("inf")
    return float(np.polyfit(xs, ys, 1)[0])


def _on_common_grid(z: SampledPath, x: SampledPath, level: int | None):
    top = max(z.level, x.level, level or 0)
    if z.level < top:
        z = refine(z, top)
    if x.level < top:
        x = refine(x, top)
    return z, x


def young_germ(z: SampledPath, x: SampledPath, alpha: float, beta: float) -> Germ:
    zv = z.values
    xv = x.values
    if zv.shape[1] == xv.shape[1]:
        def evaluate(i, j):
            return np.sum(zv[i] * (xv[j] - xv[i]), axis=1, keepdims=True)
    elif zv.shape[1] == 1:
        def evaluate(i, j):
            return zv[i] * (xv[j] - xv[i])
    else:
        raise ValueError("integrand must be scalar or match the driver dimension")
    return Germ(evaluate, x.times, alpha, beta)


def young_integral(z: SampledPath, x: SampledPath, levels: Sequence[int] | None = None,
                   alpha: float | None = None, beta: float | None = None) -> SewnPath:
    """Young integral of ``z`` against ``x`` (dot product when dimensions match)."""
    top = max(levels) if levels else None
    z, x = _on_common_grid(z, x, top)
    alpha = holder_exponent(x.values, x.times) if alpha is None else alpha
    beta = holder_exponent(z.values, z.times) if beta is None else beta
    if alpha + beta <= 1.0:
        raise SewingPreconditionError(f"Hoelder exponents sum to {alpha + beta:.3f} <= 1")
    return sew(young_germ(z, x, alpha, beta), levels)


@dataclass(frozen=True)
class ControlledPath:
    """Integrand ``Z`` of shape ``(N+1, e, d)`` with Gubinelli derivative ``(N+1, e, d, d)``.

    ``derivative[:, :, a, b]`` is the derivative of ``Z[:, :, b]`` along ``X^a``.
    """

    values: np.ndarray
    derivative: np.ndarray


def rough_germ(z: ControlledPath, lift: Level2Lift, alpha: float) -> Germ:
    zv, zd = z.values, z.derivative

    def evaluate(i, j):
        dx = lift.first_level(i, j)
        area = lift.second_level(i, j)
        return np.einsum("neb,nb->ne", zv[i], dx) + np.einsum("neab,nab->ne", zd[i], area)

    return Germ(evaluate, lift.times, alpha, 2 * alpha)


def rough_integral(z: ControlledPath, lift: Level2Lift, alpha: float,
                   levels: Sequence[int] | None = None, check: bool = True) -> SewnPath:
    if alpha <= 1.0 / 3.0:
        raise SewingPreconditionError(f"alpha={alpha} must exceed 1/3")
    return sew(rough_germ(z, lift, alpha), levels, check=check)


def function_controlled(f, df, x: SampledPath) -> ControlledPath:
    """``Z = f(X)`` as a controlled path, with ``df`` its derivative (1-d driver)."""
    xv = x.values[:, 0]
    values = np.asarray(f(xv), dtype=float).reshape(-1, 1, 1)
    deriv = np.asarray(df(xv), dtype=float).reshape(-1, 1, 1, 1)
    return ControlledPath(values, deriv)
