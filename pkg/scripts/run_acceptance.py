"""Run the primary acceptance criteria in-process and write summary.json.

Usage: python3 scripts/run_acceptance.py [--out DIR] [--only 1,2,3]
Equivalent to `f3 accept --suite primary`; exits 1 when any criterion fails.
"""
import argparse
import json
import sys
from pathlib import Path

from f3.acceptance import SuiteContext, run_suite, summary


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/acceptance")
    ap.add_argument("--only")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    only = [int(x) for x in args.only.split(",")] if args.only else None
    results = run_suite(only, SuiteContext(out_dir=out, seed=args.seed))
    s = summary(results)
    (out / "summary.json").write_text(json.dumps(s, indent=2, default=str) + "\n")
    sys.exit(0 if s["passed"] else 1)


if __name__ == "__main__":
    main()
