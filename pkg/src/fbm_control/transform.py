"""Solutions of the linear matrix equation dGamma = -Gamma sum_j A_j dB^j along
piecewise-linear drivers, their inverses, and the Wong-Zakai study."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .fbm import FbmConfig, SampledPath, dyadic_approx_batch, sample_fbm_batch
from .lie import MatrixFamily, cbhd_path, matrix_exp

logger = logging.getLogger(__name__)


class SingularTransformError(np.linalg.LinAlgError):
    pass


@dataclass
class MatrixPath:
    """Matrix-valued path on a grid; ``values`` is ``(N+1, n, n)`` or batched ``(S, N+1, n, n)``."""

    times: np.ndarray
    values: np.ndarray
    log: np.ndarray | None = None
    inverse: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def batched(self) -> bool:
        return self.values.ndim == 4

    def final(self) -> np.ndarray:
        return self.values[..., -1, :, :]

    def coarsen(self, level: int) -> "MatrixPath":
        n = len(self.times) - 1
        stride = n // 2 ** level
        pick = slice(None, None, stride)

        def cut(a):
            return None if a is None else a[..., pick, :, :]

        return MatrixPath(self.times[pick], cut(self.values), cut(self.log), cut(self.inverse),
                          dict(self.meta))


def _as_batch(driver) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(driver, SampledPath):
        return driver.times, driver.values[None]
    times, values = driver
    values = np.asarray(values, dtype=float)
    return np.asarray(times, dtype=float), values if values.ndim == 3 else values[None]


def solve_gamma_direct(family: MatrixFamily, driver, substeps: int = 4) -> MatrixPath:
    """Classical RK4 on every grid step of the piecewise-linear driver.

    ``driver`` is a :class:`SampledPath` or a ``(times, values)`` pair with
    values shaped ``(S, N+1, m)``; the result is batched in the latter case.
    """
    batched = not isinstance(driver, SampledPath)
    times, values = _as_batch(driver)
    n_samples, n_points, m = values.shape
    if m != family.count:
        raise ValueError(f"driver has {m} components, family has {family.count}")
    size = family.size
    dt = np.diff(times)
    slopes = np.diff(values, axis=1) / dt[None, :, None]
    gamma = np.broadcast_to(np.eye(size), (n_samples, size, size)).copy()
    out = np.empty((n_samples, n_points, size, size))
    out[:, 0] = gamma
    if m == 0:
        out[:] = np.eye(size)
        return MatrixPath(times, out if batched else out[0])
    frac = np.arange(substeps)[:, None] / substeps + np.array([0.0, 0.5, 1.0])[None, :] / substeps
    stage_t = times[:-1, None, None] + dt[:, None, None] * frac[None]
    mats = np.stack([family.evaluate(j, stage_t) for j in range(m)], axis=-3)  # (N, sub, 3, m, n, n)
    for i in range(n_points - 1):
        h = dt[i] / substeps
        gen = -np.einsum("sj,ucjab->sucab", slopes[:, i], mats[i])
        for u in range(substeps):
            g0, g1, g2 = gen[:, u, 0], gen[:, u, 1], gen[:, u, 2]
            k1 = gamma @ g0
            k2 = (gamma + 0.5 * h * k1) @ g1
            k3 = (gamma + 0.5 * h * k2) @ g1
            k4 = (gamma + h * k3) @ g2
            gamma = gamma + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[:, i + 1] = gamma
    return MatrixPath(times, out if batched else out[0], meta={"method": "direct"})


def solve_gamma_cbhd(family: MatrixFamily, driver, route: str = "pl") -> MatrixPath:
    """``Gamma = exp(K)`` with ``K`` the truncated CBHD series at every grid time."""
    batched = not isinstance(driver, SampledPath)
    times, values = _as_batch(driver)
    logs = []
    for sample in values:
        path = SampledPath(times, sample, kind="piecewise-linear")
        _, k = cbhd_path(family, path, route=route)
        logs.append(k)
    log = np.stack(logs)
    gamma = matrix_exp(log, family.nilpotency)
    inverse = matrix_exp(-log, family.nilpotency)
    if not batched:
        log, gamma, inverse = log[0], gamma[0], inverse[0]
    return MatrixPath(times, gamma, log=log, inverse=inverse, meta={"method": "cbhd"})


def invert_path(path: MatrixPath, nilpotency: int | None = None, cond_limit: float = 1e12) -> np.ndarray:
    """Inverse at every grid time: ``exp(-K)`` when the logarithm is stored, LU otherwise."""
    if path.inverse is not None:
        return path.inverse
    if path.log is not None:
        return matrix_exp(-path.log, nilpotency)
    cond = np.linalg.cond(path.values)
    worst = float(np.max(cond))
    logger.debug("transform condition number up to %.3g", worst)
    if not np.isfinite(worst) or worst > cond_limit:
        raise SingularTransformError(f"transform numerically singular (condition {worst:.3g})")
    eye = np.broadcast_to(np.eye(path.values.shape[-1]), path.values.shape)
    return np.linalg.solve(path.values, eye)


@dataclass
class WongZakaiReport:
    levels: list[int]
    distances: np.ndarray          # (samples, levels) sup-distance to the finest level
    monotone_fraction: float
    mean_distance: np.ndarray
    rate: float
    hurst: float
    extra: dict = field(default_factory=dict)


def wong_zakai_study(family: MatrixFamily, config: FbmConfig, n_samples: int,
                     levels: list[int] | None = None, method: str = "direct",
                     substeps: int = 2, seed: int | None = None) -> WongZakaiReport:
    """Sup-distance of the level-k solutions to the finest-level solution, per sample.

    The reference is the sample grid itself. If it is listed among the
    levels its distance is zero and it is left out of the monotonicity count.
    """
    levels = list(range(4, config.levels + 1)) if levels is None else list(levels)
    if max(levels) > config.levels:
        raise ValueError("levels exceed the sample grid")
    raw = sample_fbm_batch(config, n_samples, seed)
    solve = solve_gamma_direct if method == "direct" else solve_gamma_cbhd
    kwargs = {"substeps": substeps} if method == "direct" else {}
    finest = solve(family, (config.times, raw), **kwargs).values
    dist = np.zeros((n_samples, len(levels)))
    for c, k in enumerate(levels):
        approx = solve(family, (config.times, dyadic_approx_batch(raw, k)), **kwargs).values
        dist[:, c] = np.linalg.norm(approx - finest, axis=(-2, -1)).max(axis=1)
    compared = dist[:, :-1] if levels[-1] == config.levels else dist
    monotone = np.all(np.diff(compared, axis=1) < 0, axis=1)
    mean = dist.mean(axis=0)
    usable = mean > 0
    rate = float(-np.polyfit(np.array(levels)[usable], np.log2(mean[usable]), 1)[0]) \
        if usable.sum() >= 2 else float("nan")
    return WongZakaiReport(levels, dist, float(monotone.mean()), mean, rate, config.hurst)
