"""Run the eight-arm ablation (plus the no-relative/no-CGDL comparator) at smoke scale.

    python scripts/run_ablation.py --config configs/smoke.yaml --out ablation.json
"""

import argparse
import json
import logging

from emdc.config import load_config
from emdc.harness import ABLATION_ARMS, format_table, run_ablation, synthetic_sets

COMPARATOR = dict(ABLATION_ARMS[-1], name="h-rel-cgdl", relative=False, rezero=False, cgdl=False)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="ablation.json")
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--arms", default=None, help="comma-separated arm names to run")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    arms = ABLATION_ARMS + [COMPARATOR]
    if args.arms:
        keep = set(args.arms.split(","))
        arms = [a for a in arms if a["name"] in keep]
    train_set, eval_set = synthetic_sets(cfg)
    report = run_ablation(arms, train_set, eval_set, cfg, max_steps=args.steps)
    print(format_table(report))
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)


if __name__ == "__main__":
    main()
