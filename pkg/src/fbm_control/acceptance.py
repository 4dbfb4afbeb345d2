"""The ten acceptance criteria as callables returning a pass flag and a summary."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import mp
from .fbm import FbmConfig, SampledPath, refine, sample_fbm, sample_fbm_batch
from .lie import ScalarFunction, SeparableKernel, cbhd_path, matrix_exp, multiple_integral_pl, \
    multiple_integral_rough
from .lift import chen_defect, lift_piecewise_linear
from .lq import riccati_solution
from .sde import consistency_check, make_drivers, simulate_transformed
from .sewing import local_bound_slope, young_germ, young_integral
from .system import load_system, policy_from_expression
from .experiments import MPStudyConfig, mp_study
from .transform import solve_gamma_direct, wong_zakai_study


@dataclass
class Outcome:
    name: str
    ok: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        body = ", ".join(f"{k}={_fmt(v)}" for k, v in self.detail.items())
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name} ({self.seconds:.1f}s): {body}"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3g}"
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(float(x)) if np.isscalar(x) else _fmt(x) for x in v) + "]"
    return str(v)


def _timed(name, fn) -> Outcome:
    start = time.perf_counter()
    ok, detail = fn()
    return Outcome(name, bool(ok), detail, time.perf_counter() - start)


def chen_suite(hurst: float, samples: int = 100, level: int = 8, seed: int = 1) -> Outcome:
    def run():
        cfg = FbmConfig(hurst, 2, 1.0, level)
        raw = sample_fbm_batch(cfg, samples, seed)
        rng = np.random.default_rng(seed)
        worst = 0.0
        n = 2 ** level
        for values in raw:
            lift = lift_piecewise_linear(SampledPath(cfg.times, values))
            scale = max(float(np.ptp(values, axis=0).max() ** 2), 1.0)
            triples = np.sort(rng.integers(0, n + 1, size=(50, 3)), axis=1)
            worst = max(worst, max(chen_defect(lift, *t) for t in triples) / scale)
        return worst < 1e-10, {"max_scaled_defect": worst}
    return _timed(f"1 Chen identity H={hurst}", run)


def chain_rule(hurst: float = 0.7, level: int = 12, seed: int = 2) -> Outcome:
    def run():
        path = refine(sample_fbm(FbmConfig(hurst, 1, 1.0, 8), seed), level)
        alpha = hurst - 0.05
        sewn = young_integral(path, path, list(range(level - 6, level + 1)), alpha=alpha, beta=alpha)
        error = abs(float(np.ravel(sewn.value)[0]) - 0.5 * path.values[-1, 0] ** 2)
        slope = local_bound_slope(sewn, young_germ(path, path, alpha, alpha))
        return error < 1e-6 and slope >= 2 * alpha - 0.1, {"error": error, "slope": slope,
                                                            "target": 2 * alpha - 0.1}
    return _timed(f"2 sewing chain rule H={hurst}", run)


def cbhd_oracle(preset: str, hurst: float, samples: int = 20, level: int = 8, seed: int = 3) -> Outcome:
    def run():
        family = load_system(preset, {"model.hurst": hurst}).A
        cfg = FbmConfig(hurst, family.count, 1.0, level)
        raw = sample_fbm_batch(cfg, samples, seed)
        worst = 0.0
        for values in raw:
            path = SampledPath(cfg.times, values)
            _, K = cbhd_path(family, path)
            direct = solve_gamma_direct(family, path, substeps=16).values[-1]
            rel = np.linalg.norm(matrix_exp(K[-1], family.nilpotency) - direct) / np.linalg.norm(direct)
            worst = max(worst, float(rel))
        return worst < 1e-8, {"max_rel_error": worst}
    return _timed(f"3 CBHD vs ODE {preset} H={hurst}", run)


def wong_zakai(hurst: float, samples: int = 100, reference_level: int = 11, seed: int = 5) -> Outcome:
    def run():
        family = load_system("nilpotent_e12e23", {"model.hurst": hurst}).A
        cfg = FbmConfig(hurst, family.count, 1.0, reference_level)
        rep = wong_zakai_study(family, cfg, samples, list(range(4, 11)), substeps=2, seed=seed)
        decreasing = bool(np.all(np.diff(rep.mean_distance) < 0))
        ok = rep.monotone_fraction >= 0.95 and decreasing
        return ok, {"monotone_fraction": rep.monotone_fraction, "mean_decreasing": decreasing,
                    "rate": rep.rate}
    return _timed(f"4 Wong-Zakai H={hurst}", run)


def integral_routes(hurst: float, level: int = 8, seed: int = 5) -> Outcome:
    words = [[0], [1], [0, 0], [0, 1], [1, 0], [1, 1], [0, 1, 1], [1, 0, 0], [0, 0, 1], [1, 1, 1]]

    def run():
        path = sample_fbm(FbmConfig(hurst, 2, 1.0, level), seed)
        lift = lift_piecewise_linear(path)
        funcs = (ScalarFunction(np.sin, np.cos, "sin"), ScalarFunction(lambda t: 1 + t ** 2, lambda t: 2 * t),
                 ScalarFunction.const(1.0))
        worst = {2: 0.0, 3: 0.0}
        for w in words:
            kernel = SeparableKernel([(np.eye(2), funcs[: len(w)])])
            for t in (0.5, 1.0):
                diff = np.abs(multiple_integral_pl(kernel, path, w, t) -
                              multiple_integral_rough(kernel, lift, w, t, path=path)).max()
                key = 2 if len(w) <= 2 else 3
                worst[key] = max(worst[key], float(diff))
        return worst[2] < 1e-8 and worst[3] < 1e-6, {"max_diff_n<=2": worst[2], "max_diff_n=3": worst[3]}
    return _timed(f"5 multiple integrals pl vs rough H={hurst}", run)


def transformation_consistency(samples: int = 200, seed: int = 6) -> Outcome:
    def run():
        spec = load_system("nilpotent_e12e23", {"model.hurst": 0.7})
        drivers = make_drivers(spec, samples, 10, fbm_level=10, seed=seed)
        rep = consistency_check(spec, drivers, policy_from_expression(spec, spec.control["expression"]),
                                [6, 8, 10])
        median = np.median(rep.sup_error, axis=0)
        return bool(np.all(np.diff(median) < 0)), {"median_sup_error": median}
    return _timed("6 transformation consistency H=0.7", run)


def density_martingale(samples: int = 10_000, level: int = 8, seed: int = 7) -> Outcome:
    def run():
        spec = load_system("partially_observed_lq")
        drivers = make_drivers(spec, samples, level, seed=seed)
        batch = simulate_transformed(spec, drivers, policy_from_expression(spec, spec.control["expression"]))
        rho = batch.rho[:, -1]
        mean, se = float(rho.mean()), float(rho.std(ddof=1) / np.sqrt(samples))
        return abs(mean - 1) <= 3 * se, {"mean": mean, "se": se}
    return _timed("7 density martingale", run)


EPS = [2.0 ** -k for k in range(4, 10)]


def variation_slopes(samples: int = 2000, level: int = 11, seed: int = 8) -> Outcome:
    def run():
        spec = load_system("partially_observed_lq")
        drivers = make_drivers(spec, samples, level, seed=seed)
        base = policy_from_expression(spec, spec.control["expression"])
        batch = simulate_transformed(spec, drivers, base, density="euler")
        slopes = mp.variational_slopes(spec, batch, 1.0, 0.25, EPS)
        target = {"Y1": 1, "Y2": 2, "rho1": 1, "rho2": 2}
        fitted = {k: slopes[k].slope for k in target}
        ok = all(abs(fitted[k] - target[k]) <= 0.25 for k in target)
        return ok, fitted
    return _timed("8 variational slopes", run)


def expansion(samples: int = 2000, level: int = 11, seed: int = 9) -> Outcome:
    def run():
        spec = load_system("lq_toy")
        drivers = make_drivers(spec, samples, level, seed=seed)
        base = riccati_solution(spec).policy()
        rep = mp.expansion_check(spec, drivers, base, 1.0, 0.25, EPS)
        return rep.slope > 1.1, {"slope": rep.slope, "verdict": rep.verdict}
    return _timed("9 expansion residual slope", run)


def mp_verdicts(preset: str = "lq_toy", seed: int = 7, fix_omega2: int | None = None) -> Outcome:
    def run():
        spec = load_system(preset)
        common = dict(samples=2000, level=8, seed=seed, control="riccati", u_grid=tuple(spec.control["u_grid"]),
                      t_points=20, fix_omega2=fix_omega2)
        optimal = mp_study(spec, MPStudyConfig(**common))
        shifted = mp_study(spec, MPStudyConfig(**common, shift=0.5))
        ok = optimal["verdict"] == "PASS" and shifted["verdict"] == "VIOLATION" and \
            shifted["worst"]["margin"] < 0
        return ok, {"optimal": optimal["verdict"], "shifted": shifted["verdict"],
                    "shifted_margin": shifted["worst"]["margin"]}
    return _timed(f"10 MP verdicts {preset}", run)


def all_criteria():
    """Name and thunk for every acceptance run, in order."""
    return [
        *[(f"chen_{h}", lambda h=h: chen_suite(h)) for h in (0.4, 0.7)],
        ("chain_rule", chain_rule),
        *[(f"cbhd_{p}_{h}", lambda p=p, h=h: cbhd_oracle(p, h))
          for p in ("commuting", "nilpotent_e12e23") for h in (0.4, 0.7)],
        *[(f"wong_zakai_{h}", lambda h=h: wong_zakai(h)) for h in (0.4, 0.7)],
        *[(f"routes_{h}", lambda h=h: integral_routes(h)) for h in (0.4, 0.7)],
        ("consistency", transformation_consistency),
        ("density", density_martingale),
        ("variation_slopes", variation_slopes),
        ("expansion", expansion),
        ("mp_young", mp_verdicts),
        ("mp_rough", lambda: mp_verdicts("lq_toy_rough", fix_omega2=11)),
    ]
