"""Run the acceptance criteria and print one line each.

Usage: python scripts/run_acceptance.py [name-prefix ...]
"""
import sys

from fbm_control.acceptance import all_criteria


def main(prefixes):
    failed = 0
    for name, run in all_criteria():
        if prefixes and not name.startswith(tuple(prefixes)):
            continue
        outcome = run()
        print(outcome.line(), flush=True)
        failed += not outcome.ok
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
