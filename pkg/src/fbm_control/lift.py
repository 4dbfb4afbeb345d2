"""Level-2 geometric lifts of piecewise-linear paths and rough path metrics."""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .fbm import SampledPath


@dataclass(frozen=True)
class Level2Lift:
    """Two-level lift stored on adjacent grid pairs.

    Arbitrary grid pairs are recovered by Chen composition from prefix sums,
    so memory stays linear in the number of grid points. Inside a grid step
    the underlying path is linear.
    """

    times: np.ndarray
    increments: np.ndarray  # (N, d)
    areas: np.ndarray       # (N, d, d), second level of each adjacent pair

    def __post_init__(self):
        x0 = np.concatenate([np.zeros((1, self.dim)), np.cumsum(self.increments, axis=0)])
        s0 = np.zeros((self.n_steps + 1, self.dim, self.dim))
        cross = x0[:-1, :, None] * self.increments[:, None, :]
        np.cumsum(cross + self.areas, axis=0, out=s0[1:])
        object.__setattr__(self, "_x0", x0)
        object.__setattr__(self, "_s0", s0)

    @property
    def dim(self) -> int:
        return self.increments.shape[1]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def level(self) -> int:
        return int(np.log2(self.n_steps))

    def first_level(self, a, b) -> np.ndarray:
        return self._x0[b] - self._x0[a]

    def second_level(self, a, b) -> np.ndarray:
        """Second level between grid indices ``a <= b`` (broadcasts over arrays)."""
        a = np.asarray(a)
        b = np.asarray(b)
        xa = self._x0[a]
        return self._s0[b] - self._s0[a] - xa[..., :, None] * (self._x0[b] - xa)[..., None, :]

    def compose(self, a: int, b: int) -> np.ndarray:
        """Sequential Chen fold over adjacent pairs; a slow reference for ``second_level``."""
        x = np.zeros(self.dim)
        area = np.zeros((self.dim, self.dim))
        for i in range(a, b):
            area = area + self.areas[i] + np.outer(x, self.increments[i])
            x = x + self.increments[i]
        return area

    def from_origin(self, t) -> tuple[np.ndarray, np.ndarray]:
        """First and second level over ``[0, t]`` at arbitrary times."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        dt = self.times[1] - self.times[0]
        idx = np.clip(np.floor(t / dt).astype(int), 0, self.n_steps - 1)
        theta = (t - self.times[idx]) / dt
        part = theta[:, None] * self.increments[idx]
        x_left = self._x0[idx]
        first = x_left + part
        second = (self._s0[idx] + x_left[:, :, None] * part[:, None, :]
                  + 0.5 * part[:, :, None] * part[:, None, :])
        return first, second

    def sym_part(self, a, b) -> np.ndarray:
        x = self.first_level(a, b)
        return 0.5 * x[..., :, None] * x[..., None, :]


def lift_piecewise_linear(path: SampledPath) -> Level2Lift:
    incr = path.increments()
    return Level2Lift(path.times, incr, 0.5 * incr[:, :, None] * incr[:, None, :])


def chen_defect(lift: Level2Lift, s: int, u: int, t: int) -> float:
    lhs = lift.second_level(s, t) - lift.second_level(s, u) - lift.second_level(u, t)
    rhs = np.outer(lift.first_level(s, u), lift.first_level(u, t))
    return float(np.abs(lhs - rhs).max())


def _dyadic_pairs(n_steps: int, level: int):
    stride = n_steps // 2 ** level
    left = np.arange(0, n_steps, stride)
    return left, left + stride


def p_var_distance(a: Level2Lift, b: Level2Lift, p: float) -> float:
    """Inhomogeneous p-variation distance with the supremum over dyadic partitions."""
    if not np.allclose(a.times, b.times):
        raise ValueError("lifts live on different grids")
    if not 2.0 <= p < 3.0:
        raise ValueError("p must lie in [2, 3)")
    best = [0.0, 0.0]
    for level in range(a.level + 1):
        s, t = _dyadic_pairs(a.n_steps, level)
        d1 = np.linalg.norm(a.first_level(s, t) - b.first_level(s, t), axis=-1)
        d2 = np.linalg.norm(a.second_level(s, t) - b.second_level(s, t), axis=(-2, -1))
        best[0] = max(best[0], float(np.sum(d1 ** p)))
        best[1] = max(best[1], float(np.sum(d2 ** (p / 2))))
    return max(best[0] ** (1 / p), best[1] ** (2 / p))


def rough_holder_norm(lift: Level2Lift, alpha: float) -> float:
    """Sum of the alpha-Hoelder norm of the first level and the square root of the
    2alpha-Hoelder norm of the second level, over all grid pairs."""
    n = lift.n_steps
    dt = lift.times[1] - lift.times[0]
    idx = np.arange(n + 1)
    n1 = n2 = 0.0
    for h in range(1, n + 1):
        a, b = idx[:-h], idx[h:]
        n1 = max(n1, np.linalg.norm(lift.first_level(a, b), axis=-1).max() / (h * dt) ** alpha)
        n2 = max(n2, np.linalg.norm(lift.second_level(a, b), axis=(-2, -1)).max()
                 / (h * dt) ** (2 * alpha))
    return float(n1 + np.sqrt(n2))


def word_integral(path: SampledPath, word: tuple[int, ...], t) -> np.ndarray:
    """Iterated integral of the piecewise-linear path over the word, from 0 to each ``t``.

    Chen's relation over linear segments: a segment with increment ``d`` and
    relative length ``theta`` contributes ``prod(d[w]) theta**k / k!`` to a
    word of length ``k``.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    k = len(word)
    incr = path.increments()
    n = incr.shape[0]
    dt = path.times[1] - path.times[0]
    # prefix[j][i] holds the integral over word[:j] on [0, t_i]
    prefix = np.zeros((k + 1, n + 1))
    prefix[0] = 1.0
    for i in range(n):
        d = incr[i, list(word)]
        for j in range(k, 0, -1):
            acc = prefix[j, i]
            for r in range(j):
                acc += prefix[r, i] * np.prod(d[r:j]) / factorial(j - r)
            prefix[j, i + 1] = acc
    idx = np.clip(np.floor(t / dt).astype(int), 0, n - 1)
    theta = (t - path.times[idx]) / dt
    out = np.zeros_like(t)
    d = incr[idx][:, list(word)] * theta[:, None]
    for r in range(k + 1):
        out += prefix[r, idx] * np.prod(d[:, r:], axis=1) / factorial(k - r)
    return out
