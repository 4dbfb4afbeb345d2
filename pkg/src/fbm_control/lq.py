"""Riccati reference solution for scalar linear-quadratic presets.

For ``b = b0 x + b1 u``, constant noise, ``f = (q x^2 + r u^2)/2``,
``Phi = g x^2 / 2``, a blind sensor (``h = 0``) and a scalar multiplicative
fBm term with deterministic ``Gamma``, the optimal control is open loop.
Writing ``m`` for the mean of ``Y = Gamma X``:

    -S' = q / Gamma^2 + 2 b0 S - (Gamma b1)^2 S^2 / r,  S_T = g / Gamma_T^2
    m'  = b0 m + Gamma b1 u,  u = -Gamma b1 S m / r,  m_0 = x0

and the first-order adjoint has mean ``S m``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .system import OpenLoopPolicy, SystemSpec


@dataclass
class LqSolution:
    times: np.ndarray
    S: np.ndarray
    m: np.ndarray
    control: np.ndarray
    gamma: np.ndarray

    @property
    def adjoint_mean(self) -> np.ndarray:
        return self.S * self.m

    def policy(self) -> OpenLoopPolicy:
        return OpenLoopPolicy(self.times, self.control)


def lq_parameters(spec: SystemSpec) -> dict:
    p = dict(spec.params)
    missing = [k for k in ("b0", "b1", "q", "r", "g") if k not in p]
    if missing or spec.n != 1 or spec.d != 1:
        raise ValueError(f"not a scalar LQ preset (missing {missing})")
    return p


def riccati_solution(spec: SystemSpec, gamma: Callable[[np.ndarray], np.ndarray] | None = None,
                     n_points: int = 4097, max_step: float | None = None) -> LqSolution:
    p = lq_parameters(spec)
    b0, b1, q, r, g = (p[k] for k in ("b0", "b1", "q", "r", "g"))
    T = spec.horizon
    gam = gamma or (lambda t: np.ones_like(np.asarray(t, dtype=float)))
    times = np.linspace(0.0, T, n_points)
    step = max_step or T / 2048

    def ric(t, s):
        gt = float(gam(np.array(t)))
        return -(q / gt ** 2 + 2 * b0 * s - (gt * b1) ** 2 * s ** 2 / r)

    gT = float(gam(np.array(T)))
    back = solve_ivp(ric, (T, 0.0), [g / gT ** 2], t_eval=times[::-1], rtol=1e-11, atol=1e-12,
                     max_step=step, method="DOP853")
    S = back.y[0][::-1]

    def s_at(t):
        return np.interp(t, times, S)

    def mean(t, m):
        gt = float(gam(np.array(t)))
        return b0 * m - (gt * b1) ** 2 * s_at(t) * m / r

    fwd = solve_ivp(mean, (0.0, T), [float(spec.x0[0])], t_eval=times, rtol=1e-11, atol=1e-12,
                    max_step=step, method="DOP853")
    m = fwd.y[0]
    gv = gam(times)
    control = -gv * b1 * S * m / r
    return LqSolution(times, S, m, control, gv)


def scalar_riccati_closed_form(b0, b1, q, r, g, T, t):
    """Closed form of ``-S' = q + 2 b0 S - b1^2 S^2 / r`` with ``S_T = g`` (constant coefficients)."""
    k = b1 ** 2 / r
    lam = np.sqrt(b0 ** 2 + k * q)
    s_plus, s_minus = (b0 + lam) / k, (b0 - lam) / k
    c = (g - s_plus) / (g - s_minus)
    e = c * np.exp(-2 * lam * (T - np.asarray(t)))
    return (s_plus - s_minus * e) / (1 - e)


def frozen_gamma(times: np.ndarray, values: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Scalar ``Gamma`` held constant over each step of ``times``, as the Euler scheme sees it."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float).reshape(-1)
    h = times[1] - times[0]
    last = len(times) - 1

    def gamma(t):
        idx = np.minimum((np.asarray(t, dtype=float) / h + 1e-9).astype(int), last)
        return values[idx]

    return gamma
