"""Propagation-module timing per preset (single thread, warmed up).

    python scripts/bench.py --presets cspn,s6,s9 --size 192x256 --repeats 10
"""

import argparse
import json

from emdc.harness import benchmark_propagation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--presets", default="cspn,s6,s9")
    ap.add_argument("--size", default="192x256")
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    h, w = map(int, args.size.split("x"))
    rows = benchmark_propagation(args.presets.split(","), (h, w), args.repeats)
    print(f"{'preset':>6} {'stages':>6} {'iters':>5} {'mean ms':>9} {'std ms':>7}")
    for r in rows:
        print(f"{r['preset']:>6} {r['stages']:>6} {r['iterations']:>5} {r['mean_ms']:9.2f} {r['std_ms']:7.2f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
