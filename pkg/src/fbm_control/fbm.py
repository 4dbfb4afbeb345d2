"""Fractional Brownian motion on dyadic grids.

Exact sampling uses circulant embedding of the fractional Gaussian noise
covariance (Davies-Harte) and falls back to a Cholesky factor when the
embedding is not non-negative definite.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

CACHE_ENV = "FBM_CONTROL_CACHE"


class ConfigurationError(ValueError):
    """Raised for parameter combinations outside the supported model."""


class LevelError(ValueError):
    """Raised when a requested dyadic level does not fit the sample grid."""


@dataclass(frozen=True)
class FbmConfig:
    hurst: float
    dimension: int = 1
    horizon: float = 1.0
    levels: int = 10
    seed: int = 0

    def __post_init__(self):
        if not (1.0 / 3.0 < self.hurst < 1.0) or self.hurst == 0.5:
            raise ConfigurationError(
                f"hurst={self.hurst} must lie in (1/3, 1) and differ from 1/2"
            )
        if self.dimension < 1:
            raise ConfigurationError(f"dimension={self.dimension} must be positive")
        if not self.horizon > 0:
            raise ConfigurationError(f"horizon={self.horizon} must be positive")
        if not 0 <= self.levels <= 24:
            raise ConfigurationError(f"levels={self.levels} must lie in [0, 24]")

    @property
    def n_steps(self) -> int:
        return 2 ** self.levels

    @property
    def times(self) -> np.ndarray:
        return dyadic_times(self.horizon, self.levels)

    def config_hash(self) -> str:
        return config_hash(asdict(self))


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def dyadic_times(horizon: float, level: int) -> np.ndarray:
    n = 2 ** level
    return horizon * np.arange(n + 1) / n


@dataclass(frozen=True)
class SampledPath:
    """Path values on a dyadic grid.

    ``kind`` is ``"raw"`` for sampled data and ``"piecewise-linear"`` for
    interpolants whose breakpoints sit on the level-``breakpoint_level`` grid.
    Between grid points the path is always read as linear.
    """

    times: np.ndarray
    values: np.ndarray
    kind: str = "raw"
    breakpoint_level: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != times.shape[0]:
            raise ValueError("times and values disagree in length")
        n = times.shape[0] - 1
        if n < 1 or n & (n - 1):
            raise LevelError(f"grid has {n} steps, not a power of two")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if self.breakpoint_level is None:
            object.__setattr__(self, "breakpoint_level", self.level)

    @property
    def level(self) -> int:
        return int(np.log2(self.times.shape[0] - 1))

    @property
    def dimension(self) -> int:
        return self.values.shape[1]

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    def breakpoints(self) -> np.ndarray:
        stride = 2 ** (self.level - self.breakpoint_level)
        return np.arange(0, self.times.shape[0], stride)

    def at(self, t) -> np.ndarray:
        """Linear interpolation, shape ``(len(t), dimension)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack(
            [np.interp(t, self.times, self.values[:, j]) for j in range(self.dimension)],
            axis=-1,
        )

    def __sub__(self, other: "SampledPath") -> "SampledPath":
        if not np.array_equal(self.times, other.times):
            raise ValueError("paths live on different grids")
        return SampledPath(self.times, self.values - other.values)


def _fgn_autocovariance(hurst: float, n: int) -> np.ndarray:
    k = np.arange(n, dtype=float)
    h2 = 2.0 * hurst
    return 0.5 * ((k + 1) ** h2 - 2 * k ** h2 + np.abs(k - 1) ** h2)


def _circulant_eigenvalues(hurst: float, n: int) -> np.ndarray:
    gamma = _fgn_autocovariance(hurst, n + 1)
    row = np.concatenate([gamma[: n + 1], gamma[n - 1 : 0 : -1]])
    return np.fft.fft(row).real


def _fgn_davies_harte(hurst, n, count, rng, eig):
    m = 2 * n
    z = rng.standard_normal((count, m)) + 1j * rng.standard_normal((count, m))
    w = np.fft.fft(np.sqrt(eig / m) * z, axis=-1)
    return w[:, :n].real


def _fgn_cholesky(hurst, n, count, rng):
    gamma = _fgn_autocovariance(hurst, n)
    idx = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    chol = np.linalg.cholesky(gamma[idx] + 1e-14 * np.eye(n))
    return rng.standard_normal((count, n)) @ chol.T


def fgn_unit(hurst: float, n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` independent fGn vectors of length ``n`` with unit step."""
    eig = _circulant_eigenvalues(hurst, n)
    if eig.min() < -1e-10 * eig.max():
        logger.debug("circulant embedding indefinite (min eig %.3g); using Cholesky", eig.min())
        return _fgn_cholesky(hurst, n, count, rng)
    return _fgn_davies_harte(hurst, n, count, rng, np.clip(eig, 0.0, None))


def sample_fbm_batch(config: FbmConfig, n_samples: int, seed: int | None = None,
                     chunk: int = 512) -> np.ndarray:
    """Array of shape ``(n_samples, 2**levels + 1, dimension)`` with B_0 = 0."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    n = config.n_steps
    scale = (config.horizon / n) ** config.hurst
    out = np.zeros((n_samples, n + 1, config.dimension))
    total = n_samples * config.dimension
    flat = np.empty((total, n))
    for start in range(0, total, chunk):
        count = min(chunk, total - start)
        flat[start : start + count] = fgn_unit(config.hurst, n, count, rng)
    incr = scale * flat.reshape(n_samples, config.dimension, n).transpose(0, 2, 1)
    np.cumsum(incr, axis=1, out=out[:, 1:])
    return out


def sample_fbm(config: FbmConfig, seed: int | None = None) -> SampledPath:
    values = sample_fbm_batch(config, 1, seed)[0]
    return SampledPath(config.times, values, kind="raw",
                       meta={"hurst": config.hurst, "config_hash": config.config_hash()})


def cached_sample_fbm(config: FbmConfig, cache_dir: str | os.PathLike | None = None) -> SampledPath:
    """``sample_fbm`` with an on-disk npz cache keyed by the config hash."""
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    if not cache_dir:
        return sample_fbm(config)
    path = Path(cache_dir) / f"fbm-{config.config_hash()}.npz"
    if path.exists():
        with np.load(path) as data:
            return SampledPath(data["times"], data["values"],
                               meta={"hurst": config.hurst, "config_hash": config.config_hash()})
    sample = sample_fbm(config)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, times=sample.times, values=sample.values)
    return sample


def dyadic_approx(path: SampledPath, level: int) -> SampledPath:
    """Piecewise-linear interpolation of ``path`` through its level-``level`` points."""
    if level < 0 or level > path.level:
        raise LevelError(f"level {level} outside [0, {path.level}]")
    if path.kind == "piecewise-linear" and path.breakpoint_level <= level:
        return path
    stride = 2 ** (path.level - level)
    coarse = path.values[::stride]
    frac = (np.arange(stride) / stride)[:, None]
    slopes = np.diff(coarse, axis=0)
    fine = coarse[:-1, None, :] + frac[None, :, :] * slopes[:, None, :]
    values = np.concatenate([fine.reshape(-1, path.dimension), coarse[-1:]], axis=0)
    return SampledPath(path.times, values, kind="piecewise-linear",
                       breakpoint_level=level, meta=dict(path.meta))


def dyadic_approx_batch(values: np.ndarray, level: int) -> np.ndarray:
    """Vectorised ``dyadic_approx`` for arrays shaped ``(samples, 2**K + 1, m)``."""
    n = values.shape[1] - 1
    big = int(np.log2(n))
    if level < 0 or level > big:
        raise LevelError(f"level {level} outside [0, {big}]")
    stride = 2 ** (big - level)
    coarse = values[:, ::stride]
    frac = (np.arange(stride) / stride)[None, None, :, None]
    fine = coarse[:, :-1, None, :] + frac * np.diff(coarse, axis=1)[:, :, None, :]
    fine = fine.reshape(values.shape[0], n, values.shape[2])
    return np.concatenate([fine, coarse[:, -1:]], axis=1)


def refine(path: SampledPath, level: int) -> SampledPath:
    """Resample onto the finer level-``level`` grid; the path is unchanged as a function."""
    if level < path.level:
        raise LevelError(f"cannot refine level {path.level} down to {level}")
    times = dyadic_times(path.horizon, level)
    return SampledPath(times, path.at(times), kind="piecewise-linear",
                       breakpoint_level=path.breakpoint_level, meta=dict(path.meta))


def holder_norm(path: SampledPath, alpha: float, lags: int | None = None) -> float:
    """Discrete alpha-Hoelder seminorm over grid pairs (all lags unless ``lags`` given)."""
    x = path.values
    n = x.shape[0] - 1
    dt = path.times[1] - path.times[0]
    best = 0.0
    for h in range(1, (lags or n) + 1):
        diff = np.linalg.norm(x[h:] - x[:-h], axis=1).max()
        best = max(best, diff / (h * dt) ** alpha)
    return float(best)


def holder_exponent(values: np.ndarray, times: np.ndarray, levels: int = 4) -> float:
    """Log-log slope of the maximal increment against the lag over the finest dyadic lags."""
    values = np.asarray(values, dtype=float).reshape(values.shape[0], -1)
    lags = [2 ** j for j in range(levels)]
    dt = times[1] - times[0]
    sizes = [np.linalg.norm(values[h:] - values[:-h], axis=1).max() for h in lags]
    if min(sizes) == 0:
        return float("inf")
    return float(np.polyfit(np.log(np.array(lags) * dt), np.log(sizes), 1)[0])


def brownian_increments(n_samples: int, n_steps: int, dimension: int, horizon: float,
                        rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n_samples, n_steps, dimension)) * np.sqrt(horizon / n_steps)


def write_csv(path: SampledPath, target) -> None:
    header = "t," + ",".join(f"x{j}" for j in range(path.dimension))
    data = np.column_stack([path.times, path.values])
    np.savetxt(target, data, delimiter=",", header=header, comments="", fmt="%.17g")


def read_csv(source, kind: str = "raw") -> SampledPath:
    data = np.loadtxt(source, delimiter=",", skiprows=1, ndmin=2)
    return SampledPath(data[:, 0], data[:, 1:], kind=kind)
