"""End-to-end studies shared by the command line, the scripts and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mp
from .lq import frozen_gamma, riccati_solution
from .sde import Drivers, Transforms, compute_transforms, make_drivers, simulate_transformed
from .system import ConfigError, OpenLoopPolicy, Policy, ShiftedPolicy, SystemSpec, policy_from_expression


@dataclass
class MPStudyConfig:
    samples: int = 2000
    level: int = 8
    fbm_level: int | None = None
    seed: int = 0
    control: str | None = None       # expression, csv file, or "riccati"; preset value if None
    shift: float = 0.0
    u_grid: tuple[float, float, int] = (-3.0, 1.0, 20)
    t_points: int = 20
    groups: int = 10
    multiplier: float = 2.0
    degree: int = 2
    regime: str | None = None        # "young" / "rough"; inferred from the Hurst index if None
    fix_omega2: int | None = None    # seed of the frozen fBm path in the rough regime
    eps_grid: list[float] = field(default_factory=list)
    spike_value: float | None = None
    spike_start: float | None = None


def regime_of(spec: SystemSpec) -> str:
    return "young" if spec.hurst > 0.5 else "rough"


def build_drivers(spec: SystemSpec, cfg: MPStudyConfig) -> tuple[Drivers, Transforms]:
    regime = cfg.regime or regime_of(spec)
    if regime != regime_of(spec):
        raise ConfigError("model.hurst", f"H = {spec.hurst} does not belong to the {regime} regime")
    fixed = regime == "rough" or bool(spec.settings.get("fixed_fbm", False))
    fbm_level = cfg.fbm_level or spec.settings.get("fbm_level", cfg.level)
    drivers = make_drivers(spec, cfg.samples, cfg.level, fbm_level, cfg.seed, fixed_fbm=fixed)
    if fixed and cfg.fix_omega2 is not None and spec.m1 + spec.m2:
        frozen = make_drivers(spec, 1, cfg.level, fbm_level, cfg.fix_omega2, fixed_fbm=True)
        drivers.B, drivers.Bt = frozen.B, frozen.Bt
    return drivers, compute_transforms(spec, drivers)


def resolve_policy(spec: SystemSpec, control: str | None, drivers: Drivers, transforms: Transforms,
                   level: int, shift: float = 0.0) -> tuple[Policy, dict]:
    """Turn a control description into a policy on the simulation grid."""
    text = control if control is not None else spec.control.get("expression")
    if text is None:
        raise ConfigError("control.expression", "no control given")
    info: dict = {"control": text}
    if text == "riccati":
        gamma = None
        if spec.m1:
            if transforms.gamma.shape[0] != 1:
                raise ConfigError("control.expression",
                                  "the Riccati control needs one frozen fBm path (fixed_fbm)")
            G = transforms.at(level)[0]
            gamma = frozen_gamma(drivers.times(level), G[0, :, 0, 0])
        sol = riccati_solution(spec, gamma, max_step=drivers.horizon / 2 ** (level + 3))
        policy: Policy = sol.policy()
        info["riccati_S0"] = float(sol.S[0])
        info["lq_solution"] = sol
    elif Path(str(text)).suffix == ".csv" and Path(text).exists():
        data = np.loadtxt(text, delimiter=",", skiprows=1, ndmin=2)
        policy = OpenLoopPolicy(data[:, 0], data[:, 1:])
    else:
        policy = policy_from_expression(spec, text)
    if shift:
        policy = ShiftedPolicy(policy, shift)
        info["shift"] = shift
    return policy, info


def mp_study(spec: SystemSpec, cfg: MPStudyConfig) -> dict:
    """Adjoints, the MP condition on a (t, u) grid and, optionally, the spike-expansion checks."""
    drivers, transforms = build_drivers(spec, cfg)
    policy, info = resolve_policy(spec, cfg.control, drivers, transforms, cfg.level, cfg.shift)
    batch = simulate_transformed(spec, drivers, policy, cfg.level, transforms, density="euler")
    lo, hi, count = cfg.u_grid
    u_grid = np.linspace(lo, hi, int(count))
    t_idx = mp.grid_indices(batch.times, cfg.t_points)
    report = mp.mp_condition_check(spec, batch, u_grid, t_idx, cfg.degree, cfg.groups,
                                   multiplier=cfg.multiplier)
    out = {
        "verdict": report.verdict,
        "worst": {"t": report.worst[0], "u": report.worst[1], "margin": report.worst[2]},
        "violations": len(report.violations),
        "times": batch.times[t_idx],
        "u_grid": u_grid,
        "estimate": report.estimate,
        "tolerance": report.tolerance,
        "margin": report.margin,
        "feature_degrees": report.degrees,
        "jackknife_groups": report.groups,
        "samples": cfg.samples,
        "level": cfg.level,
        "regime": cfg.regime or regime_of(spec),
        "control": {k: v for k, v in info.items() if k != "lq_solution"},
        "checks": ["mp.condition"],
    }
    sol = info.get("lq_solution")
    if sol is not None and not spec.m1 and all(e == 0 for e in spec.h.exprs):
        adj = mp.solve_adjoints_lsmc(spec, batch, second_order=False)
        ref = np.interp(batch.times, sol.times, sol.adjoint_mean)
        est = adj.p[:, :, 0].mean(axis=0)
        out["adjoint_rel_l2"] = float(np.sqrt(np.mean((est - ref) ** 2) / np.mean(ref ** 2)))
        out["checks"].append("mp.adjoint-riccati")
    if cfg.eps_grid:
        value = cfg.spike_value if cfg.spike_value is not None else spec.control.get("spike", 1.0)
        start = cfg.spike_start if cfg.spike_start is not None else spec.control.get("spike_start", 0.25)
        exp = mp.expansion_check(spec, drivers, policy, value, start, list(cfg.eps_grid), cfg.level,
                                 transforms)
        out["expansion"] = {
            "verdict": exp.verdict, "eps": exp.widths, "residual": exp.residual,
            "residual_se": exp.residual_se, "slope": exp.slope, "delta_j": exp.delta_j,
            "j_hat": exp.j_hat, "variation_slopes": exp.variation_slopes,
        }
        out["checks"] += ["mp.expansion", "mp.variation-orders"]
    return out


def exit_code(verdicts: list[str]) -> int:
    """0 when everything passes, 2 if anything is inconclusive, 1 on a violation."""
    if any(v == "VIOLATION" for v in verdicts):
        return 1
    if any(v == "INCONCLUSIVE" for v in verdicts):
        return 2
    return 0
