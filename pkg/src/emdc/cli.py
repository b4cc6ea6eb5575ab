"""Command line: ``emdc gen|train|eval|predict|bench|ablate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config, save_config
from .datagen import generate_dataset, load_dataset, read_depth_png, write_depth_png
from .harness import ABLATION_ARMS, Checkpoint, benchmark_propagation, evaluate, format_table, predict, run_ablation, synthetic_sets, train
from .metrics import build_report
from .viz import save_depth_png, save_panel

log = logging.getLogger("emdc")


def _pair(text: str, sep: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split(sep)
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A{sep}B, got {text!r}") from None


def _size(text):
    return _pair(text, "x")


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.data.seed = args.seed
    return cfg


def cmd_gen(args):
    m = generate_dataset(args.out, args.count, args.size, args.seed, args.spots, args.noise, args.jitter, args.seq_len)
    print(f"wrote {len(m['samples'])} samples to {args.out}")


def cmd_train(args):
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        dataset = load_dataset(args.data)
    else:
        dataset = synthetic_sets(cfg)[0]
    resume = Checkpoint.load(args.resume) if args.resume else None
    ckpt = train(cfg, dataset, resume=resume, max_steps=args.steps, dump_dir=out, log_every=args.log_every)
    ckpt.save(out / "checkpoint.pt")
    save_config(cfg, out / "config.yaml")
    with open(out / "history.json", "w") as fh:
        json.dump(ckpt.history, fh)
    h = ckpt.history
    if h:
        print(f"step {ckpt.step}: l1_final {h[0]['l1_final']:.4f} -> {h[-1]['l1_final']:.4f}")


def cmd_predict(args):
    model = Checkpoint.load(args.ckpt).build_model(use_ema=not args.raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in load_dataset(args.data):
        pred = predict(model, s.rgb, s.sparse)
        write_depth_png(out / f"{s.id}_pred.png", pred)
        save_panel(out / f"{s.id}_panel.png", s.rgb, s.sparse, pred, s.gt)
        if s.frames:
            (out / s.id).mkdir(exist_ok=True)
            preds = predict(model, np.stack([s.rgb] * len(s.frames)), np.stack(s.frames))
            for t, p in enumerate(preds):
                write_depth_png(out / s.id / f"frame_{t}_pred.png", p)
    print(f"predictions written to {out}")


def cmd_eval(args):
    samples = load_dataset(args.data)
    if args.ckpt:
        report = evaluate(Checkpoint.load(args.ckpt).build_model(use_ema=not args.raw), samples)
    else:
        if not args.pred:
            raise SystemExit("eval needs --pred DIR or --ckpt FILE")
        pred_dir = Path(args.pred)
        rows, seqs = [], []
        for s in samples:
            rows.append((s.id, read_depth_png(pred_dir / f"{s.id}_pred.png"), s.gt, s.valid))
            frames = [pred_dir / s.id / f"frame_{t}_pred.png" for t in range(len(s.frames))]
            if len(frames) >= 2 and all(f.exists() for f in frames):
                seqs.append((s.id, [read_depth_png(f) for f in frames], s.gt, s.valid))
        report = build_report(rows, seqs)
    print(json.dumps(report.summary(), indent=2))
    if args.report:
        report.save(args.report)
    if args.vis:
        vis = Path(args.vis)
        vis.mkdir(parents=True, exist_ok=True)
        for s in samples:
            save_depth_png(vis / f"{s.id}_gt.png", s.gt)


def cmd_bench(args):
    rows = benchmark_propagation(args.presets.split(","), args.size, args.repeats)
    for r in rows:
        print(f"{r['preset']:>6}  stages {r['stages']:>2}  iters {r['iterations']:>3}  {r['mean_ms']:8.2f} ± {r['std_ms']:.2f} ms")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


def cmd_ablate(args):
    cfg = _load_cfg(args)
    arms = ABLATION_ARMS
    if args.arms:
        keep = set(args.arms.split(","))
        arms = [a for a in arms if a["name"] in keep]
    train_set, eval_set = synthetic_sets(cfg)
    report = run_ablation(arms, train_set, eval_set, cfg, max_steps=args.steps)
    print(format_table(report))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emdc", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--size", type=_size, default=(192, 256), help="HxW, both divisible by 32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spots", type=_size, default=(24, 24), help="spot grid RxC")
    p.add_argument("--noise", type=float, default=0.01, help="relative depth noise sigma")
    p.add_argument("--jitter", type=float, default=2.0, help="spot position jitter in pixels")
    p.add_argument("--seq-len", type=int, default=0, help="extra sparse frames per scene (>=2 enables RTSD)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory (default: in-memory synthetic set from the config)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume")
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write predicted depth PNGs and visualizations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--raw", action="store_true", help="use raw instead of EMA weights")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions (or a checkpoint) against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--pred")
    p.add_argument("--ckpt")
    p.add_argument("--raw", action="store_true")
    p.add_argument("--report")
    p.add_argument("--vis", help="also write colorized ground truth here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time the propagation module per preset")
    p.add_argument("--presets", default="s6,s9")
    p.add_argument("--size", type=_size, default=(192, 256))
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="run the eight-arm ablation")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--arms", help="comma-separated subset of a..h")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.cmd in ("train", "ablate") else logging.WARNING, format="%(asctime)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
