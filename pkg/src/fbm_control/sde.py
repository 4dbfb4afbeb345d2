"""Monte-Carlo simulation of the original and transformed systems."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fbm import FbmConfig, sample_fbm_batch
from .system import Policy, SystemSpec
from .lie import matrix_exp
from .transform import invert_path, MatrixPath, solve_gamma_cbhd, solve_gamma_direct


@dataclass
class Drivers:
    """Noise for one Monte-Carlo batch on the finest grid.

    Brownian increments live on the level-``level`` grid and are summed when a
    coarser simulation grid is requested, so every level sees the same noise.
    fBm paths live on the level-``fbm_level`` grid; a leading axis of length
    one means the same path is shared by all samples (frozen second factor).
    """

    horizon: float
    level: int
    fbm_level: int
    dW: np.ndarray
    dWt: np.ndarray
    B: np.ndarray
    Bt: np.ndarray
    seed: int = 0

    @property
    def samples(self) -> int:
        return self.dW.shape[0]

    def times(self, level: int | None = None) -> np.ndarray:
        level = self.level if level is None else level
        return self.horizon * np.arange(2 ** level + 1) / 2 ** level

    @property
    def fbm_times(self) -> np.ndarray:
        return self.times(self.fbm_level)

    def increments(self, level: int | None = None):
        level = self.level if level is None else level
        if level > self.level:
            raise ValueError(f"level {level} is finer than the driver grid {self.level}")
        k = 2 ** (self.level - level)

        def agg(a):
            return a.reshape(a.shape[0], -1, k, a.shape[2]).sum(axis=2)

        return agg(self.dW), agg(self.dWt)

    def fbm_on(self, values: np.ndarray, level: int) -> np.ndarray:
        if level > self.fbm_level:
            raise ValueError(f"level {level} is finer than the fBm grid {self.fbm_level}")
        return values[:, :: 2 ** (self.fbm_level - level)]


def make_drivers(spec: SystemSpec, n_samples: int, level: int, fbm_level: int | None = None,
                 seed: int = 0, fixed_fbm: bool = False) -> Drivers:
    fbm_level = level if fbm_level is None else fbm_level
    children = np.random.SeedSequence(seed).spawn(4)
    rng_w, rng_wt = (np.random.default_rng(c) for c in children[:2])
    n = 2 ** level
    scale = np.sqrt(spec.horizon / n)
    dW = rng_w.standard_normal((n_samples, n, spec.k1)) * scale
    dWt = rng_wt.standard_normal((n_samples, n, spec.k2)) * scale
    count = 1 if fixed_fbm else n_samples

    def fbm(child, m):
        if m == 0:
            return np.zeros((count, 2 ** fbm_level + 1, 0))
        cfg = FbmConfig(spec.hurst, m, spec.horizon, fbm_level)
        return sample_fbm_batch(cfg, count, seed=int(child.generate_state(1)[0]))

    return Drivers(spec.horizon, level, fbm_level, dW, dWt, fbm(children[2], spec.m1),
                   fbm(children[3], spec.m2), seed)


@dataclass
class Transforms:
    """``Gamma``, ``Lambda`` and inverses on the fBm grid, shapes ``(S or 1, N+1, ., .)``."""

    gamma: np.ndarray
    gamma_inv: np.ndarray
    lam: np.ndarray
    lam_inv: np.ndarray
    fbm_level: int

    def at(self, level: int):
        step = 2 ** (self.fbm_level - level)
        return tuple(a[:, ::step] for a in (self.gamma, self.gamma_inv, self.lam, self.lam_inv))


def _solve(family, times, values, method):
    n_pts = values.shape[1]
    if family.count == 0:
        eye = np.broadcast_to(np.eye(family.size), (values.shape[0], n_pts, family.size, family.size))
        return eye.copy(), eye.copy()
    if method == "cbhd":
        path = solve_gamma_cbhd(family, (times, values))
        return path.values, path.inverse
    path = solve_gamma_direct(family, (times, values))
    return path.values, invert_path(path)


def compute_transforms(spec: SystemSpec, drivers: Drivers, method: str = "direct") -> Transforms:
    """Solve for ``Gamma`` and ``Lambda`` along the finest available approximant of each fBm."""
    times = drivers.fbm_times
    g, gi = _solve(spec.A, times, drivers.B, method)
    lam, lam_i = _solve(spec.C, times, drivers.Bt, method)
    return Transforms(g, gi, lam, lam_i, drivers.fbm_level)


@dataclass
class SimulationBatch:
    times: np.ndarray
    Y: np.ndarray           # (S, N+1, n)
    X: np.ndarray           # Gamma^{-1} Y
    zeta: np.ndarray        # (S, N+1, k2)
    rho: np.ndarray         # (S, N+1)
    u: np.ndarray           # (S, N+1, d)
    gamma: np.ndarray       # (S or 1, N+1, n, n)
    gamma_inv: np.ndarray
    dW: np.ndarray          # (S, N, k1)
    dzeta: np.ndarray       # (S, N, k2)
    measure: str
    meta: dict = field(default_factory=dict)

    @property
    def samples(self) -> int:
        return self.Y.shape[0]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


def _mv(m, v):
    return np.einsum("sab,sb->sa", m, v)


def simulate_transformed(spec: SystemSpec, drivers: Drivers, policy: Policy, level: int | None = None,
                         transforms: Transforms | None = None, measure: str = "reference",
                         density: str = "log-euler") -> SimulationBatch:
    """Euler-Maruyama for the transformed state together with observation and density.

    Under ``measure="reference"`` the observation is a standard Brownian motion
    and the density carries the change of measure; under ``"physical"`` the
    observation is driven by the transformed sensor.
    """
    if measure not in ("reference", "physical"):
        raise ValueError(f"unknown measure {measure!r}")
    level = drivers.level if level is None else level
    transforms = transforms or compute_transforms(spec, drivers)
    G, Gi, L, _ = transforms.at(level)
    dW, dWt = drivers.increments(level)
    times = drivers.times(level)
    S, N = dW.shape[0], dW.shape[1]
    h = times[1] - times[0]
    Y = np.zeros((S, N + 1, spec.n))
    Y[:, 0] = spec.x0
    X = np.zeros_like(Y)
    X[:, 0] = spec.x0
    zeta = np.zeros((S, N + 1, spec.k2))
    dz = np.zeros((S, N, spec.k2))
    log_rho = np.zeros((S, N + 1))
    rho = np.ones((S, N + 1))
    U = np.zeros((S, N + 1, spec.d))
    sel = (lambda a, i: np.broadcast_to(a[:, i], (S,) + a.shape[2:]))
    for i in range(N):
        t = times[i]
        g, gi = sel(G, i), sel(Gi, i)
        x = _mv(gi, Y[:, i])
        X[:, i] = x
        u = policy(i, t, zeta[:, : i + 1])
        U[:, i] = u
        drift = spec.b.value(t, x, u)
        noise = np.einsum("sar,sr->sa", spec.sigma_value(t, x, u), dW[:, i])
        Y[:, i + 1] = Y[:, i] + _mv(g, drift * h + noise)
        hv = spec.h.value(t, x, u)
        d_inv = spec.D_inv(t)
        v = hv @ d_inv.T
        if measure == "physical":
            dz[:, i] = _mv(sel(L, i), hv * h + dWt[:, i] @ spec.D(t).T)
        else:
            dz[:, i] = dWt[:, i]
        zeta[:, i + 1] = zeta[:, i] + dz[:, i]
        gain = np.sum(v * dz[:, i], axis=1)
        if density == "euler":
            rho[:, i + 1] = rho[:, i] * (1.0 + gain)
        else:
            log_rho[:, i + 1] = log_rho[:, i] + gain - 0.5 * np.sum(v * v, axis=1) * h
    if density != "euler":
        rho = np.exp(log_rho)
    X[:, N] = _mv(sel(Gi, N), Y[:, N])
    U[:, N] = policy(N, times[N], zeta)
    return SimulationBatch(times, Y, X, zeta, rho, U, G, Gi, dW, dz, measure,
                           {"level": level, "density": density})


def simulate_density(spec: SystemSpec, batch: SimulationBatch, scheme: str = "log-euler") -> np.ndarray:
    """Recompute the density along a stored batch (``"log-euler"`` or ``"euler"``)."""
    S, N = batch.dzeta.shape[:2]
    h = batch.dt
    out = np.ones((S, N + 1))
    for i in range(N):
        t = batch.times[i]
        v = spec.h.value(t, batch.X[:, i], batch.u[:, i]) @ spec.D_inv(t).T
        gain = np.sum(v * batch.dzeta[:, i], axis=1)
        if scheme == "euler":
            out[:, i + 1] = out[:, i] * (1.0 + gain)
        else:
            out[:, i + 1] = out[:, i] * np.exp(gain - 0.5 * np.sum(v * v, axis=1) * h)
    return out


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    w = np.full(len(times), times[1] - times[0])
    w[0] = w[-1] = 0.5 * (times[1] - times[0])
    return w


def running_cost(spec: SystemSpec, batch: SimulationBatch) -> np.ndarray:
    """``f`` along the batch, shape ``(S, N+1)``."""
    return np.stack([spec.f.value(t, batch.X[:, i], batch.u[:, i])[:, 0]
                     for i, t in enumerate(batch.times)], axis=1)


def sample_costs(spec: SystemSpec, batch: SimulationBatch, rho: np.ndarray | None = None) -> np.ndarray:
    """Per-sample cost; weighted by the density under the reference measure."""
    if rho is None:
        rho = batch.rho if batch.measure == "reference" else np.ones(batch.rho.shape)
    w = trapezoid_weights(batch.times)
    terminal = spec.phi.value(batch.times[-1], batch.X[:, -1], batch.u[:, -1])[:, 0]
    return rho[:, -1] * terminal + (rho * running_cost(spec, batch)) @ w


def cost(spec: SystemSpec, batch: SimulationBatch, rho: np.ndarray | None = None) -> tuple[float, float]:
    """Monte-Carlo cost estimate and its standard error."""
    c = sample_costs(spec, batch, rho)
    return float(c.mean()), float(c.std(ddof=1) / np.sqrt(len(c)))


def _second_level_prefix(B: np.ndarray):
    inc = np.diff(B, axis=1)
    step = B[:, :-1, :, None] * inc[:, :, None, :] + 0.5 * inc[:, :, :, None] * inc[:, :, None, :]
    s0 = np.concatenate([np.zeros_like(step[:, :1]), np.cumsum(step, axis=1)], axis=1)
    return s0


def _coarse_areas(B: np.ndarray, stride: int) -> np.ndarray:
    """Second level of the piecewise-linear lift over every coarse step."""
    s0 = _second_level_prefix(B)[:, ::stride]
    bc = B[:, ::stride]
    return s0[:, 1:] - s0[:, :-1] - bc[:, :-1, :, None] * np.diff(bc, axis=1)[:, :, None, :]


def simulate_state_original(spec: SystemSpec, drivers: Drivers, policy: Policy,
                            level: int | None = None, scheme: str = "auto",
                            transforms: Transforms | None = None):
    """Direct scheme for the original state and observation under the physical measure.

    The fBm term uses the Young increment ``A_j X dB^j``; the ``"davie"``
    scheme adds ``A_b A_a X B^{ab}`` with the second level taken from the
    lift of the finest available approximant over each step. The
    ``"exponential"`` scheme applies ``exp(sum_j A_j(t_i) dB^j)`` to the
    state, which is exact when the generators are constant and commute.
    Returns ``(times, X, xi, u)``.
    """
    level = drivers.level if level is None else level
    if scheme == "auto":
        scheme = "young" if spec.hurst > 0.5 else "davie"
    if scheme not in ("young", "davie", "exponential"):
        raise ValueError(f"unknown scheme {scheme!r}")
    dW, dWt = drivers.increments(level)
    times = drivers.times(level)
    S, N = dW.shape[:2]
    h = times[1] - times[0]
    stride = 2 ** (drivers.fbm_level - level)
    Bc, Btc = drivers.B[:, ::stride], drivers.Bt[:, ::stride]
    dB, dBt = np.diff(Bc, axis=1), np.diff(Btc, axis=1)
    areas = _coarse_areas(drivers.B, stride) if scheme == "davie" and spec.m1 else None
    areas_t = _coarse_areas(drivers.Bt, stride) if scheme == "davie" and spec.m2 else None
    lam = None
    if spec.m2:
        transforms = transforms or compute_transforms(spec, drivers)
        lam = transforms.at(level)[2]
    X = np.zeros((S, N + 1, spec.n))
    X[:, 0] = spec.x0
    xi = np.zeros((S, N + 1, spec.k2))
    zeta = np.zeros_like(xi)
    U = np.zeros((S, N + 1, spec.d))

    def rough_step(family, state, db, area, t):
        if family.count == 0:
            return 0.0
        mats = np.stack([family.evaluate(j, t)[0] for j in range(family.count)])
        gen = np.einsum("sj,jab->sab", np.broadcast_to(db, (S, family.count)), mats)
        if scheme == "exponential":
            return _mv(matrix_exp(gen, family.nilpotency), state) - state
        out = _mv(gen, state)
        if area is not None:
            area = np.broadcast_to(area, (S, family.count, family.count))
            second = np.einsum("bxy,ayz,sab->sxz", mats, mats, area)
            out = out + _mv(second, state)
        return out

    for i in range(N):
        t = times[i]
        x = X[:, i]
        u = policy(i, t, zeta[:, : i + 1])
        U[:, i] = u
        noise = np.einsum("sar,sr->sa", spec.sigma_value(t, x, u), dW[:, i])
        X[:, i + 1] = x + spec.b.value(t, x, u) * h + noise + rough_step(
            spec.A, x, dB[:, i], None if areas is None else areas[:, i], t)
        obs = spec.h.value(t, x, u) * h + dWt[:, i] @ spec.D(t).T
        xi[:, i + 1] = xi[:, i] + obs + rough_step(
            spec.C, xi[:, i], dBt[:, i], None if areas_t is None else areas_t[:, i], t)
        zeta[:, i + 1] = xi[:, i + 1] if lam is None else _mv(
            np.broadcast_to(lam[:, i + 1], (S, spec.k2, spec.k2)), xi[:, i + 1])
    U[:, N] = policy(N, times[N], zeta)
    return times, X, xi, U


@dataclass
class ConsistencyReport:
    levels: list[int]
    sup_error: np.ndarray     # (S, levels)
    mean_error: np.ndarray
    decreasing: bool


def consistency_check(spec: SystemSpec, drivers: Drivers, policy: Policy, levels: list[int],
                      scheme: str = "auto") -> ConsistencyReport:
    """Sup-distance between the original-state scheme and ``Gamma^{-1} Y`` on shared noise."""
    transforms = compute_transforms(spec, drivers)
    errs = []
    for k in levels:
        _, X, _, _ = simulate_state_original(spec, drivers, policy, k, scheme, transforms)
        batch = simulate_transformed(spec, drivers, policy, k, transforms, measure="physical")
        errs.append(np.linalg.norm(X - batch.X, axis=2).max(axis=1))
    errs = np.array(errs).T
    mean = errs.mean(axis=0)
    return ConsistencyReport(list(levels), errs, mean, bool(np.all(np.diff(mean) < 0)))


def moment_sup(values: np.ndarray, p: float = 2.0) -> tuple[float, float]:
    """``E[sup_t |V_t|^p]`` and its standard error for ``values`` of shape ``(S, N+1, ...)``."""
    v = np.abs(values).reshape(values.shape[0], values.shape[1], -1)
    s = np.linalg.norm(v, axis=2).max(axis=1) ** p
    return float(s.mean()), float(s.std(ddof=1) / np.sqrt(len(s)))
