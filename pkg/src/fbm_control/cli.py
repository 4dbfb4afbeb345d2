"""Command line entry point: ``fbm-control <subcommand> ...``.

Every subcommand writes a deterministic artifact set (CSV, JSON, SVG) into
``--out`` and prints a one-line summary, or the JSON report with ``--json``.
Exit status is 0 on PASS, 1 on a violation and 2 on inconclusive results or
configuration errors.
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import MPStudyConfig, exit_code, mp_study, resolve_policy
from .fbm import (CACHE_ENV, ConfigurationError, FbmConfig, cached_sample_fbm, config_hash,
                  holder_exponent, read_csv, refine, write_csv)
from .lie import NilpotencyError, cbhd_path, matrix_exp
from .lift import chen_defect, lift_piecewise_linear, rough_holder_norm
from .sde import (compute_transforms, consistency_check, cost, make_drivers, simulate_transformed)
from .sewing import (SewingPreconditionError, function_controlled, local_bound_slope, rough_germ,
                     rough_integral, young_germ, young_integral)
from .system import AssumptionError, ConfigError, check_assumptions, dump_json, load_system
from .transform import solve_gamma_direct, wong_zakai_study


def _plot(path: Path, draw) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "fbm-control"
    fig, ax = plt.subplots(figsize=(6, 4))
    draw(fig, ax)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _write_table(path: Path, header: list[str], rows) -> None:
    np.savetxt(path, np.asarray(rows, dtype=float), delimiter=",", header=",".join(header),
               comments="", fmt="%.17g")


def _overrides(args) -> dict:
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        try:
            overrides[key] = float(value)
        except ValueError:
            overrides[key] = value
    return overrides


def _spec(args):
    return load_system(args.spec, _overrides(args))


def _level_solution(job):
    # lambdified coefficients do not pickle, so workers rebuild the family
    source, overrides, times, values, substeps = job
    family = load_system(source, overrides).A
    return solve_gamma_direct(family, (times, values), substeps=substeps).values


# --- subcommands -----------------------------------------------------------------


def cmd_sample(args, out: Path) -> dict:
    cfg = FbmConfig(args.hurst, args.dim, args.horizon, args.level, args.seed)
    path = cached_sample_fbm(cfg)
    write_csv(path, out / "fbm.csv")
    _plot(out / "fbm.svg", lambda fig, ax: (ax.plot(path.times, path.values), ax.set_xlabel("t")))
    est = [holder_exponent(path.values[:, j], path.times) for j in range(path.dimension)]
    return {"config_hash": cfg.config_hash(), "hurst": args.hurst, "level": args.level,
            "holder_exponent": est, "checks": ["fbm.sample"], "verdict": "PASS"}


def cmd_lift(args, out: Path) -> dict:
    if args.input:
        path = read_csv(args.input)
    else:
        path = cached_sample_fbm(FbmConfig(args.hurst, args.dim, args.horizon, args.level, args.seed))
    lift = lift_piecewise_linear(path)
    n = lift.n_steps
    rng = np.random.default_rng(args.seed)
    triples = np.sort(rng.integers(0, n + 1, size=(200, 3)), axis=1)
    defect = max(chen_defect(lift, *t) for t in triples)
    scale = float(np.ptp(path.values, axis=0).max() ** 2)
    x, area = lift.first_level(0, np.arange(n + 1)), lift.second_level(0, np.arange(n + 1))
    d = lift.dim
    rows = np.column_stack([path.times, x, area.reshape(n + 1, d * d)])
    header = ["t"] + [f"x{i}" for i in range(d)] + [f"x{i}{j}" for i in range(d) for j in range(d)]
    _write_table(out / "lift.csv", header, rows)
    _plot(out / "lift.svg", lambda fig, ax: (ax.plot(path.times, area.reshape(n + 1, -1)),
                                             ax.set_xlabel("t"), ax.set_title("second level")))
    alpha = args.alpha if args.alpha else 0.9 * min(args.hurst, 0.5)
    ok = defect < 1e-10 * max(scale, 1.0)
    return {"config_hash": config_hash({"input": str(args.input), "hurst": args.hurst,
                                        "level": args.level, "seed": args.seed, "dim": args.dim}),
            "chen_defect_max": defect, "path_scale_sq": scale,
            "rough_holder_norm": rough_holder_norm(lift, alpha), "alpha": alpha,
            "checks": ["lift.chen"], "verdict": "PASS" if ok else "VIOLATION"}


def cmd_integrate(args, out: Path) -> dict:
    """Sew ``int B dB`` for the piecewise-linear interpolant of a level-``--level`` sample."""
    cfg = FbmConfig(args.hurst, 1, args.horizon, args.level, args.seed)
    path = cached_sample_fbm(cfg)
    if args.sew_level < args.level:
        raise ConfigError("--sew-level", "must not be coarser than the sample level")
    final = float(path.values[-1, 0])
    levels = list(range(max(1, args.sew_level - 6), args.sew_level + 1))
    fine = refine(path, args.sew_level)
    if args.hurst > 0.5:
        alpha = args.hurst - 0.05
        sewn = young_integral(fine, fine, levels, alpha=alpha, beta=alpha)
        germ = young_germ(fine, fine, alpha, alpha)
        target = 2 * alpha
    else:
        alpha = args.hurst - 0.03
        lift = lift_piecewise_linear(fine)
        z = function_controlled(lambda v: v, lambda v: np.ones(v.shape + (1,)), fine)
        sewn = rough_integral(z, lift, alpha, levels)
        germ = rough_germ(z, lift, alpha)
        target = 3 * alpha
    slope = local_bound_slope(sewn, germ)
    value = float(np.ravel(sewn.value)[0])
    error = abs(value - 0.5 * final ** 2)
    rep = sewn.report
    _write_table(out / "sewing.csv", ["level", "value_at_T"],
                 np.column_stack([rep.levels, np.asarray(rep.values_at_T)[:, 0]]))
    _plot(out / "sewing.svg", lambda fig, ax: (ax.semilogy(rep.levels[1:], np.maximum(rep.cauchy, 1e-300), "o-"),
                                               ax.set_xlabel("level"), ax.set_ylabel("Cauchy gap")))
    ok = error < args.tol and slope >= target - 0.1
    return {"config_hash": cfg.config_hash(), "sew_level": args.sew_level, "integral": value,
            "half_square": 0.5 * final ** 2, "error": error, "local_bound_slope": slope,
            "slope_target": target, "checks": ["sewing.chain-rule", "sewing.local-bound"],
            "verdict": "PASS" if ok else "VIOLATION"}


def cmd_cbhd(args, out: Path) -> dict:
    spec = _spec(args)
    family = spec.A
    if family.count == 0:
        raise ConfigError("A", "the system has no fBm generators")
    cfg = FbmConfig(spec.hurst, family.count, spec.horizon, args.level, args.seed)
    path = cached_sample_fbm(cfg)
    breaks, K = cbhd_path(family, path, route=args.route)
    gamma_cbhd = matrix_exp(K, family.nilpotency)
    direct = solve_gamma_direct(family, path, substeps=args.substeps).values
    gd = direct[:: max(1, (len(direct) - 1) // (len(breaks) - 1))] if len(breaks) < len(direct) else direct
    rel = float(np.linalg.norm(gamma_cbhd[-1] - direct[-1]) / np.linalg.norm(direct[-1]))
    n = family.size
    _write_table(out / "cbhd.csv", ["t"] + [f"K{i}{j}" for i in range(n) for j in range(n)],
                 np.column_stack([breaks, K.reshape(len(breaks), -1)]))
    _plot(out / "cbhd.svg", lambda fig, ax: (ax.plot(breaks, K.reshape(len(breaks), -1)),
                                             ax.set_xlabel("t"), ax.set_title("log Gamma")))
    return {"config_hash": spec.config_hash(), "route": args.route, "relative_error_T": rel,
            "sup_relative_error": float(np.max(np.linalg.norm(gamma_cbhd - gd, axis=(1, 2)))
                                        / np.max(np.linalg.norm(gd, axis=(1, 2)))),
            "K_T": K[-1], "checks": ["cbhd.ode-oracle"], "verdict": "PASS" if rel < args.tol else "VIOLATION"}


def cmd_wongzakai(args, out: Path) -> dict:
    spec = _spec(args)
    cfg = FbmConfig(spec.hurst, spec.m1, spec.horizon, args.sample_level, args.seed)
    levels = list(range(args.min_level, args.max_level + 1))
    if args.workers > 1:
        from .fbm import dyadic_approx_batch, sample_fbm_batch
        raw = sample_fbm_batch(cfg, args.samples, args.seed)
        src = (args.spec, _overrides(args))
        jobs = [(*src, cfg.times, raw, args.substeps)] + \
               [(*src, cfg.times, dyadic_approx_batch(raw, k), args.substeps) for k in levels]
        with ProcessPoolExecutor(args.workers) as pool:
            finest, *approx = list(pool.map(_level_solution, jobs))
        dist = np.stack([np.linalg.norm(a - finest, axis=(-2, -1)).max(axis=1) for a in approx], axis=1)
        monotone = float(np.mean(np.all(np.diff(dist, axis=1) < 0, axis=1)))
        mean = dist.mean(axis=0)
    else:
        rep = wong_zakai_study(spec.A, cfg, args.samples, levels, substeps=args.substeps, seed=args.seed)
        dist, monotone, mean = rep.distances, rep.monotone_fraction, rep.mean_distance
    rate = float(-np.polyfit(levels, np.log2(mean), 1)[0])
    _write_table(out / "wongzakai.csv", [f"level{k}" for k in levels], dist)
    _plot(out / "wongzakai.svg", lambda fig, ax: (ax.semilogy(levels, dist.T, color="0.8", lw=0.5),
                                                  ax.semilogy(levels, mean, "k-o"), ax.set_xlabel("level"),
                                                  ax.set_ylabel("sup distance")))
    decreasing = bool(np.all(np.diff(mean) < 0))
    ok = decreasing and monotone >= args.fraction
    return {"config_hash": spec.config_hash(), "levels": levels, "mean_distance": mean,
            "strictly_decreasing": decreasing, "monotone_fraction": monotone, "rate": rate,
            "hurst": spec.hurst, "checks": ["transform.wong-zakai"], "verdict": "PASS" if ok else "VIOLATION"}


def cmd_simulate(args, out: Path) -> dict:
    spec = _spec(args)
    check_assumptions(spec)
    level = args.level or spec.settings.get("level", 8)
    levels = [int(k) for k in args.consistency.split(",")] if args.consistency else []
    if levels and min(levels) < 1:
        raise ConfigError("--consistency", "levels must be positive")
    # drivers live on the finest grid in use and are coarsened from there
    finest = max([level, *levels])
    fbm_level = max(finest, spec.settings.get("fbm_level", finest))
    drivers = make_drivers(spec, args.batch, finest, fbm_level, args.seed,
                           fixed_fbm=bool(spec.settings.get("fixed_fbm", False)))
    transforms = compute_transforms(spec, drivers)
    policy, info = resolve_policy(spec, args.control, drivers, transforms, level)
    batch = simulate_transformed(spec, drivers, policy, level, transforms, measure=args.measure,
                                 density=args.density)
    j, se = cost(spec, batch)
    rho_T = batch.rho[:, -1]
    rows = np.column_stack([rho_T, batch.Y[:, -1], batch.X[:, -1], batch.zeta[:, -1]])
    header = ["rho_T"] + [f"Y{i}_T" for i in range(spec.n)] + [f"X{i}_T" for i in range(spec.n)] + \
             [f"zeta{i}_T" for i in range(spec.k2)]
    _write_table(out / "simulate.csv", header, rows)
    _plot(out / "simulate.svg", lambda fig, ax: (ax.plot(batch.times, batch.X.mean(axis=0)),
                                                 ax.set_xlabel("t"), ax.set_title("mean state")))
    report = {"config_hash": spec.config_hash(), "cost": j, "cost_se": se,
              "rho_T_mean": float(rho_T.mean()), "rho_T_se": float(rho_T.std(ddof=1) / np.sqrt(len(rho_T))),
              "control": {k: v for k, v in info.items() if k != "lq_solution"},
              "measure": args.measure, "level": level, "samples": args.batch,
              "checks": ["sde.transformed", "sde.density", "sde.cost"], "verdict": "PASS"}
    if levels:
        rep = consistency_check(spec, drivers, policy, levels)
        median = np.median(rep.sup_error, axis=0)
        report["consistency"] = {"levels": levels, "median_sup_error": median,
                                 "mean_sup_error": rep.mean_error}
        report["checks"].append("sde.consistency")
        # A = 0 makes both schemes coincide up to round-off
        exact = np.max(median) < 1e-12 * max(1.0, float(np.abs(batch.X).max()))
        if not (exact or np.all(np.diff(median) < 0)):
            report["verdict"] = "VIOLATION"
    return report


def cmd_mp_check(args, out: Path) -> dict:
    spec = _spec(args)
    check_assumptions(spec)
    eps = [float(e) for e in args.eps_grid.split(",")] if args.eps_grid else []
    u = spec.control.get("u_grid", [-3.0, 1.0, 20])
    if args.u_grid:
        lo, hi, count = args.u_grid.split(",")
        u = [float(lo), float(hi), int(count)]
    cfg = MPStudyConfig(
        samples=args.batch or spec.settings.get("samples", 2000),
        level=args.level or spec.settings.get("level", 8),
        fbm_level=spec.settings.get("fbm_level"), seed=args.seed, control=args.control,
        shift=args.shift, u_grid=tuple(u), t_points=args.t_points or spec.control.get("t_points", 20),
        groups=args.groups, multiplier=args.tol, regime=args.hurst_regime, fix_omega2=args.fix_omega2,
        eps_grid=eps)
    res = mp_study(spec, cfg)
    T, U = np.meshgrid(res["times"], res["u_grid"], indexing="ij")
    _write_table(out / "mp_surface.csv", ["t", "u", "estimate", "tolerance", "margin"],
                 np.column_stack([T.ravel(), U.ravel(), res["estimate"].ravel(), res["tolerance"].ravel(),
                                  res["margin"].ravel()]))

    def heat(fig, ax):
        im = ax.pcolormesh(res["u_grid"], res["times"], res["estimate"], shading="nearest", cmap="RdBu")
        fig.colorbar(im, ax=ax)
        bad = res["margin"] < 0
        ax.scatter(U[bad], T[bad], marker="x", color="k", s=12)
        ax.set_xlabel("u")
        ax.set_ylabel("t")

    _plot(out / "mp_surface.svg", heat)
    res["config_hash"] = spec.config_hash()
    verdicts = [res["verdict"]] + ([res["expansion"]["verdict"]] if "expansion" in res else [])
    res["overall"] = ["PASS", "VIOLATION", "INCONCLUSIVE"][exit_code(verdicts)]
    return res


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbm-control", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=Path("out"), help="artifact directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--json", action="store_true", help="print the JSON report")
    common.add_argument("--workers", type=int, default=1, help="worker processes where supported")
    common.add_argument("--cache", help=f"fBm cache directory (default: ${CACHE_ENV})")
    with_spec = argparse.ArgumentParser(add_help=False)
    with_spec.add_argument("--spec", required=True, help="TOML file or bundled preset name")
    with_spec.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config entry, e.g. params.a=0.3")
    path_args = argparse.ArgumentParser(add_help=False)
    path_args.add_argument("--hurst", type=float, default=0.7)
    path_args.add_argument("--dim", type=int, default=1)
    path_args.add_argument("--level", type=int, default=10)
    path_args.add_argument("--horizon", type=float, default=1.0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", parents=[common, path_args], help="sample an fBm path")
    p.set_defaults(run=cmd_sample)

    p = sub.add_parser("lift", parents=[common, path_args], help="level-2 lift and Chen check")
    p.add_argument("--input", help="CSV path (t, x0, ...); sampled when omitted")
    p.add_argument("--alpha", type=float)
    p.set_defaults(run=cmd_lift)

    p = sub.add_parser("integrate", parents=[common, path_args], help="sewn integral of B dB")
    p.add_argument("--sew-level", type=int, default=12, help="finest partition level")
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(run=cmd_integrate, level=8)

    p = sub.add_parser("cbhd", parents=[common, with_spec], help="CBHD logarithm against the ODE")
    p.add_argument("--level", type=int, default=8)
    p.add_argument("--route", choices=["pl", "rough"], default="pl")
    p.add_argument("--substeps", type=int, default=16)
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(run=cmd_cbhd)

    p = sub.add_parser("wongzakai", parents=[common, with_spec], help="Wong-Zakai refinement study")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--min-level", type=int, default=4)
    p.add_argument("--max-level", type=int, default=10)
    p.add_argument("--sample-level", type=int, default=11)
    p.add_argument("--substeps", type=int, default=2)
    p.add_argument("--fraction", type=float, default=0.95)
    p.set_defaults(run=cmd_wongzakai)

    p = sub.add_parser("simulate", parents=[common, with_spec], help="Monte-Carlo batch and cost")
    p.add_argument("--control", help="expression in t and zeta[i], CSV file, or 'riccati'")
    p.add_argument("--batch", type=int, default=1000)
    p.add_argument("--level", type=int)
    p.add_argument("--measure", choices=["reference", "physical"], default="reference")
    p.add_argument("--density", choices=["log-euler", "euler"], default="log-euler")
    p.add_argument("--consistency", metavar="LEVELS", help="comma-separated levels, e.g. 6,8,10")
    p.set_defaults(run=cmd_simulate)

    p = sub.add_parser("mp-check", parents=[common, with_spec], help="maximum-principle condition")
    p.add_argument("--control", help="expression in t and zeta[i], CSV file, or 'riccati'")
    p.add_argument("--shift", type=float, default=0.0, help="add a constant to the control")
    p.add_argument("--eps-grid", help="comma-separated spike widths for the expansion check")
    p.add_argument("--batch", type=int)
    p.add_argument("--level", type=int)
    p.add_argument("--tol", type=float, default=2.0, help="tolerance in standard errors")
    p.add_argument("--u-grid", help="lo,hi,count")
    p.add_argument("--t-points", type=int)
    p.add_argument("--groups", type=int, default=10, help="jackknife groups")
    p.add_argument("--hurst-regime", choices=["young", "rough"])
    p.add_argument("--fix-omega2", type=int, help="seed of the frozen fBm path")
    p.set_defaults(run=cmd_mp_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.cache:
        os.environ[CACHE_ENV] = args.cache
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        report = args.run(args, out)
    except (ConfigError, ConfigurationError, AssumptionError, NilpotencyError,
            SewingPreconditionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report = {"command": args.command, "version": __version__, **report}
    text = dump_json(report)
    (out / f"{args.command}.json").write_text(text + "\n")
    verdict = report.get("overall", report["verdict"])
    if args.json:
        print(text)
    else:
        print(f"{args.command}: {verdict} (config {report.get('config_hash', '-')}) -> {out}")
    return exit_code([verdict])


if __name__ == "__main__":
    sys.exit(main())
