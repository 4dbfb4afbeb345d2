"""Variational slopes and the expansion residual slope for a preset."""
import argparse

from fbm_control import mp
from fbm_control.lq import riccati_solution
from fbm_control.sde import make_drivers, simulate_transformed
from fbm_control.system import load_system, policy_from_expression


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--spec", default="partially_observed_lq")
    parser.add_argument("--samples", type=int, default=2000)
    parser.add_argument("--level", type=int, default=11)
    parser.add_argument("--seed", type=int, default=8)
    parser.add_argument("--spike", type=float, default=1.0)
    parser.add_argument("--start", type=float, default=0.25)
    parser.add_argument("--eps", type=int, nargs=2, default=[4, 9], help="exponent range of 2^-k")
    args = parser.parse_args()
    spec = load_system(args.spec)
    eps = [2.0 ** -k for k in range(args.eps[0], args.eps[1] + 1)]
    drivers = make_drivers(spec, args.samples, args.level, seed=args.seed)
    text = spec.control["expression"]
    base = riccati_solution(spec).policy() if text == "riccati" else policy_from_expression(spec, text)
    batch = simulate_transformed(spec, drivers, base, density="euler")
    for key, est in mp.variational_slopes(spec, batch, args.spike, args.start, eps).items():
        print(f"{key}: slope {est.slope:.3f} band [{est.band[0]:.3f}, {est.band[1]:.3f}]")
    rep = mp.expansion_check(spec, drivers, base, args.spike, args.start, eps)
    print(f"expansion residual slope {rep.slope:.3f} ({rep.verdict})")


if __name__ == "__main__":
    main()
