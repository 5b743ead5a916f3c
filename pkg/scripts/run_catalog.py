"""Run every canned scenario (or the ones named) and tabulate the assertions.

    python scripts/run_catalog.py --out runs
    python scripts/run_catalog.py relax double-slit
"""
import argparse
import sys

from pilotwave.runner import catalog, load_scenario, run_scenario


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="*")
    ap.add_argument("--out", default="runs")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    names = args.names or [name for name, _, _ in catalog()]
    failed = 0
    for name in names:
        rep = run_scenario(load_scenario(name), args.out, workers=args.workers)
        for key, a in rep.assertions.items():
            print(f"{name:<24} {key:<28} {'PASS' if a['passed'] else 'FAIL'}  {a['value']}  (bound {a['bound']})")
        print(f"{name:<24} {'elapsed':<28} {rep.elapsed:.1f} s")
        failed += not rep.passed
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
