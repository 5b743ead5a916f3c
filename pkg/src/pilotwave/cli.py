"""Command line entry point: ``pilotwave run|validate|catalog``."""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .errors import PilotWaveError
from .runner import catalog, load_scenario, run_scenario


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pilotwave", description="Run pilot-wave scenarios.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario file or canned scenario name")
    run.add_argument("scenario")
    run.add_argument("--out", type=Path, default=None, help="output root (default $PILOTWAVE_OUT or ./runs)")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--quiet", action="store_true")
    val = sub.add_parser("validate", help="parse and validate without running")
    val.add_argument("scenario")
    sub.add_parser("catalog", help="list canned scenarios")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "catalog":
            for name, experiment, desc in catalog():
                print(f"{name:<24} {experiment:<24} {desc}")
            return 0
        s = load_scenario(args.scenario)
        if args.command == "validate":
            print(f"{s.name}: ok ({s.experiment})")
            return 0
        if args.seed is not None:
            s = replace(s, seed=args.seed)
        root = args.out or Path(os.environ.get("PILOTWAVE_OUT", "runs"))
        log = None if args.quiet else print
        report = run_scenario(s, root, workers=max(1, args.workers), log=log)
        return report.exit_status
    except (PilotWaveError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
