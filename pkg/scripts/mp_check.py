"""MP verdicts for the optimal and shifted controls over several seeds."""
import argparse

from fbm_control.experiments import MPStudyConfig, mp_study
from fbm_control.system import load_system


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--spec", default="lq_toy")
    parser.add_argument("--seeds", type=int, nargs="+", default=[7])
    parser.add_argument("--shifts", type=float, nargs="+", default=[0.0, 0.5])
    parser.add_argument("--samples", type=int, default=2000)
    parser.add_argument("--level", type=int, default=8)
    parser.add_argument("--fix-omega2", type=int)
    args = parser.parse_args()
    spec = load_system(args.spec)
    for seed in args.seeds:
        for shift in args.shifts:
            cfg = MPStudyConfig(samples=args.samples, level=args.level, seed=seed, control="riccati",
                                shift=shift, u_grid=tuple(spec.control["u_grid"]), fix_omega2=args.fix_omega2)
            res = mp_study(spec, cfg)
            worst = res["worst"]
            print(f"seed={seed} shift={shift}: {res['verdict']} violations={res['violations']} "
                  f"worst t={worst['t']:.3f} u={worst['u']} margin={worst['margin']:.3g}", flush=True)


if __name__ == "__main__":
    main()
