"""200-step smoke training on the in-memory synthetic set, then EMA evaluation.

    python scripts/smoke_train.py --config configs/smoke.yaml --out runs/smoke
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from emdc.config import load_config, save_config
from emdc.harness import evaluate, synthetic_sets, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/smoke.yaml")
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, eval_set = synthetic_sets(cfg)
    ckpt = train(cfg, train_set, max_steps=args.steps, log_every=20)
    ckpt.save(out / "checkpoint.pt")
    save_config(cfg, out / "config.yaml")
    report = evaluate(ckpt.build_model(use_ema=True), eval_set)
    report.save(out / "report.json")
    h = ckpt.history
    final = float(np.mean([r["l1_final"] for r in h[-10:]]))
    print(f"l1_final {h[0]['l1_final']:.4f} -> {final:.4f} (mean of last 10 steps)")
    print(json.dumps(report.summary(), indent=2))


if __name__ == "__main__":
    main()
