"""Featurization latency on a random window, swept over event counts.

Usage: python3 scripts/run_bench.py [--height H] [--width W] [--counts N ...] [--repeats R]
Numbers are reported, not asserted; they depend on the host's cores.
"""
import argparse
import json

import torch

from f3.bench import run_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--height", type=int, default=720)
    ap.add_argument("--width", type=int, default=1280)
    ap.add_argument("--counts", type=int, nargs="+", default=[50_000, 200_000, 500_000])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--threads", type=int)
    args = ap.parse_args()
    if args.threads:
        torch.set_num_threads(args.threads)
    for n in args.counts:
        rep = run_bench(n, args.height, args.width, repeats=args.repeats)
        print(json.dumps({"events": n, "threads": rep.threads, "latency_ms": rep.latency_ms,
                          "events_per_second": rep.events_per_second,
                          "stages_p50_ms": {k: v["p50"] for k, v in rep.stages_ms.items()}}))


if __name__ == "__main__":
    main()
