"""Spike variations, the second-order cost expansion, adjoint processes by
least-squares Monte Carlo, and the maximum-principle condition."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement

import numpy as np

from .sde import (Drivers, SimulationBatch, Transforms, compute_transforms, sample_costs,
                  simulate_transformed, trapezoid_weights)
from .system import Policy, SystemSpec, spike_control

Verdict = str  # "PASS" | "VIOLATION" | "INCONCLUSIVE"


def _mv(m, v):
    return np.einsum("...ab,...b->...a", m, v)


def _quad(hess, x):
    """``hess[..., r, a, b] x_a x_b`` for ``hess`` shaped ``(S, r, n, n)`` and ``x`` ``(..., S, n)``."""
    return np.einsum("srab,...sa,...sb->...sr", hess, x, x)


@dataclass
class _Point:
    """Coefficients and their variations at one grid time along the base path."""

    t: float
    g: np.ndarray
    gi: np.ndarray
    x: np.ndarray
    d_inv: np.ndarray
    b_x: np.ndarray
    b_xx: np.ndarray
    s_x: list
    s_xx: list
    h: np.ndarray
    h_x: np.ndarray
    h_xx: np.ndarray
    f: np.ndarray
    f_x: np.ndarray
    f_xx: np.ndarray
    db: np.ndarray | None = None
    ds: list | None = None
    ds_x: list | None = None
    dh: np.ndarray | None = None
    dh_x: np.ndarray | None = None
    df: np.ndarray | None = None


def _point(spec: SystemSpec, batch: SimulationBatch, i: int, u_value=None) -> _Point:
    S = batch.samples
    t = batch.times[i]
    x = batch.X[:, i]
    u = batch.u[:, i]
    g = np.broadcast_to(batch.gamma[:, i], (S, spec.n, spec.n))
    gi = np.broadcast_to(batch.gamma_inv[:, i], (S, spec.n, spec.n))
    pt = _Point(
        t, g, gi, x, spec.D_inv(t),
        spec.b.jac(t, x, u), spec.b.hess(t, x, u),
        [s.jac(t, x, u)[:, :, :] for s in spec.sigma], [s.hess(t, x, u) for s in spec.sigma],
        spec.h.value(t, x, u), spec.h.jac(t, x, u), spec.h.hess(t, x, u),
        spec.f.value(t, x, u)[:, 0], spec.f.jac(t, x, u)[:, 0], spec.f.hess(t, x, u)[:, 0],
    )
    if u_value is not None:
        uv = np.broadcast_to(np.atleast_1d(u_value), u.shape)
        pt.db = spec.b.value(t, x, uv) - spec.b.value(t, x, u)
        pt.ds = [s.value(t, x, uv) - s.value(t, x, u) for s in spec.sigma]
        pt.ds_x = [s.jac(t, x, uv) - s.jac(t, x, u) for s in spec.sigma]
        pt.dh = spec.h.value(t, x, uv) - spec.h.value(t, x, u)
        pt.dh_x = spec.h.jac(t, x, uv) - spec.h.jac(t, x, u)
        pt.df = spec.f.value(t, x, uv)[:, 0] - spec.f.value(t, x, u)[:, 0]
    return pt


@dataclass
class VariationalPaths:
    """First and second order variations for several spike widths at once.

    Paths are not stored: ``sup2`` maps ``"Y1" "Y2" "rho1" "rho2"`` to the
    per-sample ``sup_t |.|^2`` with shape ``(E, S)``, ``terminal`` holds the
    values at ``T`` and ``j_hat`` the per-sample expansion ``(E, S)``. With
    ``keep_paths`` the full ``(E, S, N+1, ...)`` arrays land in ``paths``.
    """

    widths: list[float]
    start: float
    sup2: dict
    terminal: dict
    j_hat: np.ndarray
    paths: dict | None = None


def spike_indicator(times: np.ndarray, start: float, width: float) -> np.ndarray:
    return ((times >= start - 1e-12) & (times < start + width - 1e-12)).astype(float)


def variational_paths(spec: SystemSpec, batch: SimulationBatch, u_value, start: float,
                      widths: list[float], keep_paths: bool = False) -> VariationalPaths:
    """Euler discretisation of the variational equations on the base batch's increments.

    The base batch must be simulated under the reference measure; its density
    scheme should be ``"euler"`` so that the discrete expansion is exact to
    second order.
    """
    for w in widths:
        if w <= 0 or start < 0 or start + w > batch.times[-1] + 1e-12:
            raise ValueError(f"spike [{start}, {start + w}] leaves [0, {batch.times[-1]}]")
    E = len(widths)
    S, N = batch.dW.shape[:2]
    n = spec.n
    h = batch.dt
    ind = np.stack([spike_indicator(batch.times, start, w) for w in widths])  # (E, N+1)
    y1 = np.zeros((E, S, n))
    y2 = np.zeros_like(y1)
    r1 = np.zeros((E, S))
    r2 = np.zeros_like(r1)
    sup2 = {k: np.zeros((E, S)) for k in ("Y1", "Y2", "rho1", "rho2")}
    paths = {"Y1": [], "Y2": [], "rho1": [], "rho2": []} if keep_paths else None
    weights = trapezoid_weights(batch.times)
    jhat = np.zeros((E, S))
    rho = batch.rho
    for i in range(N + 1):
        for key, val in (("Y1", np.sum(y1 ** 2, axis=-1)), ("Y2", np.sum(y2 ** 2, axis=-1)),
                         ("rho1", r1 ** 2), ("rho2", r2 ** 2)):
            np.maximum(sup2[key], val, out=sup2[key])
        if keep_paths:
            for key, val in (("Y1", y1), ("Y2", y2), ("rho1", r1), ("rho2", r2)):
                paths[key].append(val.copy())
        pt = _point(spec, batch, i, u_value)
        I = ind[:, i][:, None]
        x1 = _mv(pt.gi, y1)
        x2 = _mv(pt.gi, y2)
        fx = pt.f_x
        run = (rho[:, i] * (np.sum(fx * (x1 + x2), axis=-1)
                            + 0.5 * np.einsum("sab,esa,esb->es", pt.f_xx, x1, x1) + pt.df * I)
               + (r1 + r2) * pt.f + r1 * np.sum(fx * x1, axis=-1))
        jhat += weights[i] * run
        if i == N:
            break
        dW = batch.dW[:, i]
        dz = batch.dzeta[:, i]
        drift1 = _mv(pt.b_x, x1)
        drift2 = _mv(pt.b_x, x2) + 0.5 * _quad(pt.b_xx, x1) + pt.db * I[..., None]
        noise1 = 0.0
        noise2 = 0.0
        for r in range(spec.k1):
            w = dW[:, r][:, None]
            noise1 = noise1 + (_mv(pt.s_x[r], x1) + pt.ds[r] * I[..., None]) * w
            noise2 = noise2 + (_mv(pt.s_x[r], x2) + 0.5 * _quad(pt.s_xx[r], x1)
                               + _mv(pt.ds_x[r], x1) * I[..., None]) * w
        dinv = pt.d_inv
        v = pt.h @ dinv.T
        hx1 = _mv(pt.h_x, x1) @ dinv.T
        hx2 = _mv(pt.h_x, x2) @ dinv.T
        hxx = _quad(pt.h_xx, x1) @ dinv.T
        dhv = (pt.dh @ dinv.T) * I[..., None]
        dhx = (_mv(pt.dh_x, x1) @ dinv.T) * I[..., None]
        rb = rho[:, i][:, None]
        g1 = r1[..., None] * v + rb * hx1 + rb * dhv
        g2 = (r2[..., None] * v + r1[..., None] * (hx1 + dhv)
              + rb * hx2 + 0.5 * rb * hxx + rb * dhx)
        y1 = y1 + _mv(pt.g, drift1 * h + noise1)
        y2 = y2 + _mv(pt.g, drift2 * h + noise2)
        r1 = r1 + np.sum(g1 * dz, axis=-1)
        r2 = r2 + np.sum(g2 * dz, axis=-1)
    T = batch.times[-1]
    xT, uT = batch.X[:, -1], batch.u[:, -1]
    phi = spec.phi.value(T, xT, uT)[:, 0]
    phi_x = spec.phi.jac(T, xT, uT)[:, 0]
    phi_xx = spec.phi.hess(T, xT, uT)[:, 0]
    jhat += (rho[:, -1] * (np.sum(phi_x * (x1 + x2), axis=-1)
                           + 0.5 * np.einsum("sab,esa,esb->es", phi_xx, x1, x1))
             + (r1 + r2) * phi + r1 * np.sum(phi_x * x1, axis=-1))
    terminal = {"Y1": y1, "Y2": y2, "rho1": r1, "rho2": r2}
    if keep_paths:
        paths = {k: np.stack(v, axis=2) for k, v in paths.items()}
    return VariationalPaths(list(widths), start, sup2, terminal, jhat, paths)


def _slope(eps, values):
    eps = np.asarray(eps, dtype=float)
    values = np.asarray(values, dtype=float)
    ok = values > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(eps[ok]), np.log(values[ok]), 1)[0])


@dataclass
class OrderEstimate:
    slope: float
    band: tuple[float, float]
    means: np.ndarray


def estimate_order(samples: np.ndarray, eps, n_boot: int = 200, seed: int = 0,
                   level: float = 0.95) -> OrderEstimate:
    """Log-log slope of ``mean(samples[e])`` against ``eps[e]``.

    ``samples`` is ``(E, S)``, typically ``sup_t |V|^p`` per sample. Rows share
    random numbers, so the bootstrap resamples sample indices jointly. An
    all-zero quantity has no slope and reports ``nan``.
    """
    samples = np.asarray(samples, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    means = samples.mean(axis=1)
    slope = _slope(eps, means)
    if not np.isfinite(slope) or samples.shape[1] < 2:
        return OrderEstimate(slope, (slope, slope), means)
    rng = np.random.default_rng(seed)
    S = samples.shape[1]
    boots = [_slope(eps, samples[:, rng.integers(0, S, S)].mean(axis=1)) for _ in range(n_boot)]
    lo, hi = np.nanquantile(boots, [(1 - level) / 2, (1 + level) / 2])
    return OrderEstimate(slope, (float(lo), float(hi)), means)


def variational_slopes(spec: SystemSpec, batch: SimulationBatch, u_value, start: float,
                       widths: list[float]) -> dict[str, OrderEstimate]:
    """Orders in ``eps`` of ``E[sup |Y1|^2]``, ``E[sup |Y2|^2]``, ``E[sup |rho1|^2]``, ``E[sup |rho2|^2]``."""
    var = variational_paths(spec, batch, u_value, start, widths)
    return {k: estimate_order(v, widths) for k, v in var.sup2.items()}


@dataclass
class ExpansionReport:
    widths: list[float]
    delta_j: np.ndarray       # J(u^eps) - J(u_bar), per width
    j_hat: np.ndarray
    residual: np.ndarray      # mean of the per-sample residual
    residual_se: np.ndarray
    residual_abs: np.ndarray  # mean absolute per-sample residual
    slope: float
    slope_pathwise: float
    variation_moments: dict = field(default_factory=dict)
    variation_slopes: dict = field(default_factory=dict)
    verdict: Verdict = "INCONCLUSIVE"


def expansion_check(spec: SystemSpec, drivers: Drivers, base: Policy, u_value, start: float,
                    widths: list[float], level: int | None = None,
                    transforms: Transforms | None = None, slope_floor: float = 1.1) -> ExpansionReport:
    """Compare ``J(u^eps) - J(u_bar)`` with the second-order expansion across spike widths.

    All runs share the same reference-measure noise. The residual should be
    ``o(eps)``, i.e. its fitted log-log slope should exceed one.
    """
    transforms = transforms or compute_transforms(spec, drivers)
    base_batch = simulate_transformed(spec, drivers, base, level, transforms, density="euler")
    base_costs = sample_costs(spec, base_batch)
    var = variational_paths(spec, base_batch, u_value, start, widths)
    delta, resid, resid_se, resid_abs = [], [], [], []
    for e, w in enumerate(widths):
        pol = spike_control(base, u_value, start, w)
        pert = simulate_transformed(spec, drivers, pol, level, transforms, density="euler")
        d = sample_costs(spec, pert) - base_costs
        res = d - var.j_hat[e]
        delta.append(d.mean())
        resid.append(res.mean())
        resid_se.append(res.std(ddof=1) / np.sqrt(len(res)))
        resid_abs.append(np.abs(res).mean())
    resid = np.array(resid)
    resid_se = np.array(resid_se)
    slope = _slope(widths, np.abs(resid))
    moments = {k: v.mean(axis=1) for k, v in var.sup2.items()}
    slopes = {k: _slope(widths, v) for k, v in moments.items()}
    noisy = np.abs(resid) < 2 * resid_se
    if not np.any(resid_abs):
        verdict = "PASS"  # the expansion is exact, e.g. a spike that does not change the control
    elif noisy.sum() > len(widths) // 2:
        verdict = "INCONCLUSIVE"
    else:
        verdict = "PASS" if slope > slope_floor else "VIOLATION"
    return ExpansionReport(list(widths), np.array(delta), var.j_hat.mean(axis=1), resid, resid_se,
                           np.array(resid_abs), slope, _slope(widths, resid_abs), moments, slopes,
                           verdict)


# --- least-squares Monte Carlo ---------------------------------------------------


def polynomial_features(columns: list[np.ndarray], degree: int = 2) -> np.ndarray:
    """Monomials up to ``degree`` of the given ``(S,)`` columns, constant included."""
    S = columns[0].shape[0] if columns else 1
    feats = [np.ones(S)]
    for k in range(1, degree + 1):
        for combo in combinations_with_replacement(range(len(columns)), k):
            feats.append(np.prod([columns[c] for c in combo], axis=0))
    return np.stack(feats, axis=1)


class Regressor:
    """Ordinary least squares on standardised features with a small ridge term."""

    def __init__(self, features: np.ndarray, ridge: float = 1e-10):
        mu = features.mean(axis=0)
        sd = features.std(axis=0)
        const = sd < 1e-12
        sd[const] = 1.0
        mu[const] = 0.0
        keep = ~const
        keep[0] = True
        self.z = ((features - mu) / sd)[:, keep]
        gram = self.z.T @ self.z
        self.gram_inv = np.linalg.inv(gram + ridge * np.trace(gram) * np.eye(gram.shape[0]) / len(gram))

    def fit(self, targets: np.ndarray) -> np.ndarray:
        shape = targets.shape
        y = targets.reshape(shape[0], -1)
        coef = self.gram_inv @ (self.z.T @ y)
        return (self.z @ coef).reshape(shape)


def _state_features(batch: SimulationBatch, i: int, degree: int) -> np.ndarray:
    cols = [batch.Y[:, i, a] for a in range(batch.Y.shape[2])]
    cols += [batch.zeta[:, i, a] for a in range(batch.zeta.shape[2])]
    if np.ptp(batch.rho[:, i]) > 1e-12:
        cols.append(batch.rho[:, i])
    return polynomial_features(cols, degree)


def observation_features(batch: SimulationBatch, i: int, degree: int = 2) -> np.ndarray:
    z = batch.zeta[:, : i + 1]
    cols = [z[:, -1, a] for a in range(z.shape[2])] + [z[:, :, a].mean(axis=1) for a in range(z.shape[2])]
    return polynomial_features(cols, degree)


@dataclass
class Adjoints:
    times: np.ndarray
    alpha: np.ndarray   # (S, N+1)
    beta: np.ndarray    # (S, N+1, k2)
    p: np.ndarray       # (S, N+1, n)
    q: np.ndarray       # (S, N+1, n, k1)
    q_tilde: np.ndarray # (S, N+1, n, k2)
    P: np.ndarray       # (S, N+1, n, n)
    Q: np.ndarray       # (S, N+1, n, n, k1)


def _weighted_hessian(hess: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``sum_k weights[s, k] hess[s, k]`` for ``hess`` shaped ``(S, r, n, n)``."""
    return np.einsum("sk,skab->sab", weights, hess)


def solve_adjoints_lsmc(spec: SystemSpec, batch: SimulationBatch, degree: int = 2,
                        second_order: bool = True) -> Adjoints:
    """Backward regression scheme for the first and second order adjoint equations.

    Martingale parts ``Z`` come from ``E_i[Y_{i+1} dW_i] / h``; the value
    process from ``E_i[Y_{i+1}] + h F_i``. The orthogonal martingale terms are
    zero in this discretisation.
    """
    S, N = batch.dW.shape[:2]
    n, k1, k2 = spec.n, spec.k1, spec.k2
    h = batch.dt
    T = batch.times[-1]
    alpha = np.zeros((S, N + 1))
    beta = np.zeros((S, N + 1, k2))
    p = np.zeros((S, N + 1, n))
    q = np.zeros((S, N + 1, n, k1))
    qt = np.zeros((S, N + 1, n, k2))
    P = np.zeros((S, N + 1, n, n))
    Q = np.zeros((S, N + 1, n, n, k1))
    giT = np.broadcast_to(batch.gamma_inv[:, N], (S, n, n))
    xT, uT = batch.X[:, N], batch.u[:, N]
    alpha[:, N] = spec.phi.value(T, xT, uT)[:, 0]
    p[:, N] = _mv(np.swapaxes(giT, 1, 2), spec.phi.jac(T, xT, uT)[:, 0])
    if second_order:
        P[:, N] = batch.rho[:, N, None, None] * np.swapaxes(giT, 1, 2) @ spec.phi.hess(T, xT, uT)[:, 0] @ giT
    for i in range(N - 1, -1, -1):
        pt = _point(spec, batch, i)
        reg = Regressor(_state_features(batch, i, degree))
        dW, dz = batch.dW[:, i], batch.dzeta[:, i]
        a1, p1, P1 = alpha[:, i + 1], p[:, i + 1], P[:, i + 1]
        blocks = [a1[:, None], a1[:, None] * dz, p1, (p1[:, :, None] * dW[:, None, :]).reshape(S, -1),
                  (p1[:, :, None] * dz[:, None, :]).reshape(S, -1)]
        if second_order:
            blocks += [P1.reshape(S, -1), (P1[..., None] * dW[:, None, None, :]).reshape(S, -1)]
        fitted = reg.fit(np.concatenate(blocks, axis=1))
        c = 0
        e_alpha = fitted[:, c]; c += 1
        beta[:, i] = fitted[:, c:c + k2] / h; c += k2
        e_p = fitted[:, c:c + n]; c += n
        q[:, i] = fitted[:, c:c + n * k1].reshape(S, n, k1) / h; c += n * k1
        qt[:, i] = fitted[:, c:c + n * k2].reshape(S, n, k2) / h; c += n * k2
        v = pt.h @ pt.d_inv.T
        alpha[:, i] = e_alpha + h * (pt.f + np.sum(v * beta[:, i], axis=1))
        g, gi = pt.g, pt.gi
        giT_ = np.swapaxes(gi, 1, 2)
        gT = np.swapaxes(g, 1, 2)
        # c_mat[:, :, r2] is column r2 of Gamma^{-T} h_X^T D^{-T}
        c_mat = giT_ @ np.swapaxes(pt.h_x, 1, 2) @ pt.d_inv.T
        drive = (_mv(giT_, pt.f_x) + _mv(giT_ @ np.swapaxes(pt.b_x, 1, 2) @ gT, e_p)
                 + np.einsum("sr,sar->sa", v, qt[:, i]) + np.einsum("sar,sr->sa", c_mat, beta[:, i]))
        for r in range(k1):
            drive = drive + _mv(giT_ @ np.swapaxes(pt.s_x[r], 1, 2) @ gT, q[:, i, :, r])
        p[:, i] = e_p + h * drive
        if not second_order:
            continue
        e_P = fitted[:, c:c + n * n].reshape(S, n, n); c += n * n
        Q[:, i] = fitted[:, c:c + n * n * k1].reshape(S, n, n, k1) / h
        rho = batch.rho[:, i, None, None]
        lin = g @ pt.b_x @ gi
        dP = rho * giT_ @ pt.f_xx @ gi + np.swapaxes(lin, 1, 2) @ e_P + e_P @ lin
        for r in range(k1):
            sl = g @ pt.s_x[r] @ gi
            dP = dP + np.swapaxes(sl, 1, 2) @ e_P @ sl
            dP = dP + np.swapaxes(sl, 1, 2) @ Q[:, i, :, :, r] + Q[:, i, :, :, r] @ sl
            dP = dP + rho * giT_ @ _weighted_hessian(pt.s_xx[r], _mv(gT, q[:, i, :, r])) @ gi
        dh_xx = np.einsum("lr,slab->srab", pt.d_inv.T, pt.h_xx)
        dP = dP + rho * giT_ @ _weighted_hessian(dh_xx, beta[:, i]) @ gi
        for r2 in range(k2):
            outer = qt[:, i, :, r2, None] * c_mat[:, None, :, r2]
            dP = dP + rho * (outer + np.swapaxes(outer, 1, 2))
        dP = dP + rho * giT_ @ _weighted_hessian(pt.b_xx, _mv(gT, e_p)) @ gi
        P[:, i] = e_P + h * dP
        # keep P symmetric against round-off in the products
        P[:, i] = (P[:, i] + np.swapaxes(P[:, i], 1, 2)) / 2
    return Adjoints(batch.times, alpha, beta, p, q, qt, P, Q)


def hamiltonian(spec: SystemSpec, batch: SimulationBatch, adj: Adjoints, i: int, u) -> np.ndarray:
    """Per-sample Hamiltonian at grid index ``i`` with control value(s) ``u``."""
    S = batch.samples
    t = batch.times[i]
    x = batch.X[:, i]
    u = np.broadcast_to(np.atleast_2d(u), (S, spec.d))
    g = np.broadcast_to(batch.gamma[:, i], (S, spec.n, spec.n))
    out = spec.f.value(t, x, u)[:, 0]
    out = out + np.sum(adj.p[:, i] * _mv(g, spec.b.value(t, x, u)), axis=1)
    out = out + np.sum(adj.beta[:, i] * (spec.h.value(t, x, u) @ spec.D_inv(t).T), axis=1)
    for r, s in enumerate(spec.sigma):
        out = out + np.sum(adj.q[:, i, :, r] * _mv(g, s.value(t, x, u)), axis=1)
    return out


def mp_integrand(spec: SystemSpec, batch: SimulationBatch, adj: Adjoints, i: int, u) -> np.ndarray:
    """``rho dH + tr(dsigma^T Gamma^T P Gamma dsigma) / 2`` per sample."""
    S = batch.samples
    t = batch.times[i]
    x = batch.X[:, i]
    ub = batch.u[:, i]
    uu = np.broadcast_to(np.atleast_2d(u), (S, spec.d))
    dH = hamiltonian(spec, batch, adj, i, uu) - hamiltonian(spec, batch, adj, i, ub)
    g = np.broadcast_to(batch.gamma[:, i], (S, spec.n, spec.n))
    second = np.zeros(S)
    for s in spec.sigma:
        gd = _mv(g, s.value(t, x, uu) - s.value(t, x, ub))
        second += np.einsum("sa,sab,sb->s", gd, adj.P[:, i], gd)
    return batch.rho[:, i] * dH + 0.5 * second


def adjoint_expansion(spec: SystemSpec, batch: SimulationBatch, adj: Adjoints, u_value,
                      start: float, width: float) -> tuple[float, float]:
    """Leading-order ``J(u^eps) - J(u_bar)`` assembled from the adjoints, with its standard error.

    Integrates the MP integrand over the spike window with the cost's
    trapezoid weights; agrees with the simulated expansion up to ``o(eps)``.
    """
    ind = spike_indicator(batch.times, start, width)
    w = trapezoid_weights(batch.times) * ind
    total = np.zeros(batch.samples)
    for i in np.nonzero(w)[0]:
        total += w[i] * mp_integrand(spec, batch, adj, i, u_value)
    return float(total.mean()), float(total.std(ddof=1) / np.sqrt(len(total)))


@dataclass
class MPReport:
    t_indices: list[int]
    u_grid: np.ndarray
    estimate: np.ndarray        # (t, u) conditional-expectation estimate at the worst sample
    tolerance: np.ndarray       # (t, u) two standard errors at that sample
    margin: np.ndarray          # (t, u) min over samples of estimate + tolerance
    worst: tuple
    verdict: Verdict
    groups: int
    degrees: list[int]          # feature degree used at each time
    violations: list = field(default_factory=list)


def subset(batch: SimulationBatch, idx) -> SimulationBatch:
    """Samples ``idx`` of a batch; shared transforms stay shared."""
    def pick(a):
        return a if a.shape[0] == 1 else a[idx]
    return replace(batch, Y=batch.Y[idx], X=batch.X[idx], zeta=batch.zeta[idx], rho=batch.rho[idx],
                   u=batch.u[idx], gamma=pick(batch.gamma), gamma_inv=pick(batch.gamma_inv),
                   dW=batch.dW[idx], dzeta=batch.dzeta[idx])


def mp_condition_check(spec: SystemSpec, batch: SimulationBatch, u_grid, t_indices,
                       degree: int = 2, groups: int = 10, adjoint_degree: int = 2,
                       multiplier: float = 2.0, floor: float = 1e-12) -> MPReport:
    """Conditional expectation of the MP integrand given the observation history.

    Adjoints are solved on the full batch and the integrand is regressed on
    polynomial features of ``zeta``, of degree at most ``degree`` and chosen
    per time by BIC. The standard error comes from a
    delete-a-group jackknife over the whole pipeline, so the error of the
    estimated adjoints enters the tolerance; a single regression residual
    cannot see it (the time-zero adjoint is one number per batch).
    A grid point is violated when estimate plus ``multiplier`` standard
    errors is negative at some sample.
    """
    u_grid = np.asarray(u_grid, dtype=float).reshape(-1, spec.d)
    S = batch.samples
    if groups < 2 or S // groups < 20:
        raise ValueError(f"need at least 2 groups of 20 samples, got {groups} groups for {S} samples")
    adj_full = solve_adjoints_lsmc(spec, batch, adjoint_degree)
    feats, chosen = [], []
    for i in t_indices:
        values = np.stack([mp_integrand(spec, batch, adj_full, i, u) for u in u_grid], axis=1)
        k = select_degree(batch, i, values, degree)
        chosen.append(k)
        feats.append(observation_features(batch, i, k))

    def surface(idx):
        sub = subset(batch, idx)
        adj = solve_adjoints_lsmc(spec, sub, adjoint_degree)
        out = np.empty((len(t_indices), S, len(u_grid)))
        for a, i in enumerate(t_indices):
            values = np.stack([mp_integrand(spec, sub, adj, i, u) for u in u_grid], axis=1)
            out[a] = _Design(feats[a][idx]).predict(feats[a], values)
        return out

    everything = np.arange(S)
    est = surface(everything)
    parts = np.array_split(everything, groups)
    jack = np.stack([surface(np.setdiff1d(everything, part)) for part in parts])
    se = np.sqrt((groups - 1) / groups * np.sum((jack - jack.mean(axis=0)) ** 2, axis=0))
    lower = est + multiplier * se + floor                  # (T, S, U)
    worst_s = np.argmin(lower, axis=1)                     # (T, U)
    pick = (lambda v: np.take_along_axis(v, worst_s[:, None, :], axis=1)[:, 0])
    margin = pick(lower)
    violations = [(float(batch.times[t_indices[a]]), u_grid[b].tolist(), float(margin[a, b]))
                  for a, b in zip(*np.nonzero(margin < 0))]
    wa, wb = np.unravel_index(np.argmin(margin), margin.shape)
    worst = (float(batch.times[t_indices[wa]]), u_grid[wb].tolist(), float(margin[wa, wb]))
    verdict = "VIOLATION" if violations else "PASS"
    return MPReport(list(t_indices), u_grid, pick(est), multiplier * pick(se), margin, worst, verdict,
                    groups, chosen, violations)


def select_degree(batch: SimulationBatch, i: int, values: np.ndarray, max_degree: int) -> int:
    """Observation-feature degree minimising BIC pooled over the target columns."""
    S = values.shape[0]
    best, best_bic = 0, np.inf
    for k in range(max_degree + 1):
        design = _Design(observation_features(batch, i, k))
        rss = np.sum((values - design.predict(design.raw, values)) ** 2, axis=0)
        rss = np.maximum(rss, 1e-300)
        bic = np.sum(S * np.log(rss / S)) + values.shape[1] * design.z.shape[1] * np.log(S)
        if bic < best_bic - 1e-9:
            best, best_bic = k, bic
    return best


class _Design:
    """Least squares on fixed features, reusable for predictions at other points."""

    def __init__(self, features: np.ndarray):
        self.mu = features.mean(axis=0)
        sd = features.std(axis=0)
        self.keep = sd > 1e-12
        self.keep[0] = True
        self.sd = np.where(self.keep, sd, 1.0)
        self.mu[~self.keep] = 0.0
        self.mu[0] = 0.0
        self.sd[0] = 1.0
        self.raw = features
        self.z = self._scale(features)

    def _scale(self, features):
        return ((features - self.mu) / self.sd)[:, self.keep]

    def predict(self, at: np.ndarray, targets: np.ndarray) -> np.ndarray:
        coef, *_ = np.linalg.lstsq(self.z, targets, rcond=None)
        return self._scale(at) @ coef


def grid_indices(times: np.ndarray, count: int) -> list[int]:
    """``count`` grid indices spread over ``[0, T)``."""
    n = len(times) - 1
    return sorted(set(int(round(k)) for k in np.linspace(0, n - 1, count)))
