"""Training loop, schedule, EMA, evaluation, propagation benchmark and ablations."""

from __future__ import annotations

import copy
import logging
import math
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .config import ExperimentConfig, TrainConfig, config_from_dict, config_to_dict
from .datagen import Sample, build_samples
from .fcspn import FCSPN, StageSchedule
from .losses import total_loss
from .metrics import MetricReport, build_report
from .model import EMDC

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- schedule


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup to ``cfg.lr``, then one cosine period down to 0, per mini-batch."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.total_epochs * steps_per_epoch
    if step < warm:
        return cfg.lr * step / warm
    progress = min((step - warm) / max(total - warm, 1), 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- EMA


def ema_update(ema_params, params, decay: float):
    """Element-wise ``decay * ema + (1 - decay) * params``; returns new tensors."""
    return [decay * e + (1.0 - decay) * p for e, p in zip(ema_params, params)]


class ModelEMA:
    """EMA over a model's floating-point state (parameters and BN statistics).

    With ``warmup`` the effective decay is ``min(decay, (1 + n) / (10 + n))``
    so short runs are not dominated by the initial weights.
    """

    def __init__(self, model: torch.nn.Module, decay: float, warmup: bool = True):
        self.module = copy.deepcopy(model).eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.decay = decay
        self.warmup = warmup
        self.updates = 0

    def effective_decay(self) -> float:
        if not self.warmup:
            return self.decay
        return min(self.decay, (1 + self.updates) / (10 + self.updates))

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        d = self.effective_decay()
        src = model.state_dict()
        for name, e in self.module.state_dict().items():
            p = src[name].detach()
            if e.dtype.is_floating_point:
                e.copy_(ema_update([e], [p], d)[0])
            else:
                e.copy_(p)
        self.updates += 1

    def state_dict(self):
        return {"module": self.module.state_dict(), "updates": self.updates}

    def load_state_dict(self, state):
        self.module.load_state_dict(state["module"])
        self.updates = state["updates"]


# ---------------------------------------------------------------- data


def to_tensors(samples: list[Sample], dtype=torch.float32):
    rgb = torch.tensor(np.stack([s.rgb for s in samples]), dtype=dtype).permute(0, 3, 1, 2).contiguous()
    sparse = torch.tensor(np.stack([s.sparse for s in samples]), dtype=dtype)[:, None]
    gt = torch.tensor(np.stack([s.gt for s in samples]), dtype=dtype)[:, None]
    valid = torch.tensor(np.stack([s.valid for s in samples]))[:, None]
    return rgb, sparse, gt, valid


def augment(rgb, sparse, gt, valid, gen: torch.Generator, flip: bool = True, jitter: float = 0.2):
    """Per-sample horizontal flip (all inputs jointly) and color jitter (RGB only)."""
    rgb, sparse, gt, valid = rgb.clone(), sparse.clone(), gt.clone(), valid.clone()
    for i in range(rgb.shape[0]):
        if flip and torch.rand((), generator=gen) < 0.5:
            rgb[i], sparse[i], gt[i], valid[i] = (t[i].flip(-1) for t in (rgb, sparse, gt, valid))
        if jitter > 0:
            b, c, s = (1.0 + (torch.rand(3, generator=gen) * 2 - 1) * jitter).tolist()
            x = TF.adjust_brightness(rgb[i], b)
            x = TF.adjust_contrast(x, c)
            rgb[i] = TF.adjust_saturation(x, s).clamp(0.0, 1.0)
    return rgb, sparse, gt, valid


def synthetic_sets(cfg: ExperimentConfig):
    d = cfg.data
    size = (d.height, d.width)
    train = build_samples(d.train_count, size, d.seed, d.spots, d.jitter_px, d.noise_sigma_rel, 0, d.scene)
    evals = build_samples(d.eval_count, size, d.seed + 7919, d.spots, d.jitter_px, d.noise_sigma_rel, d.seq_len, d.scene)
    return train, evals


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: dict
    ema: dict
    optimizer: dict
    step: int
    config: dict
    history: list[dict] = field(default_factory=list)

    def save(self, path) -> None:
        torch.save(self.__dict__, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls(**torch.load(path, weights_only=False))

    def build_model(self, use_ema: bool = True) -> EMDC:
        model = EMDC(config_from_dict(self.config))
        if use_ema:
            model.load_state_dict(self.ema["module"])
        else:
            model.load_state_dict(self.model)
        return model.eval()


class NonFiniteLossError(FloatingPointError):
    pass


def train(
    cfg: ExperimentConfig,
    dataset: list[Sample],
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
    dump_dir=None,
    log_every: int = 0,
) -> Checkpoint:
    """Train EMDC on ``dataset``; deterministic in ``cfg.train.seed``.

    Data order is a fixed permutation per epoch and augmentation is seeded
    per step, so resuming from a checkpoint replays the same batches.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    tc = cfg.train
    torch.manual_seed(tc.seed)
    model = EMDC(cfg)
    ema = ModelEMA(model, tc.ema_decay, tc.ema_warmup)
    opt = torch.optim.AdamW(model.parameters(), lr=tc.lr, betas=tuple(tc.betas), weight_decay=tc.weight_decay)
    step, history = 0, []
    if resume is not None:
        model.load_state_dict(resume.model)
        ema.load_state_dict(resume.ema)
        opt.load_state_dict(resume.optimizer)
        step, history = resume.step, list(resume.history)

    rgb_all, sparse_all, gt_all, valid_all = to_tensors(dataset)
    n = len(dataset)
    bs = min(tc.batch_size, n)
    steps_per_epoch = n // bs
    total_steps = tc.total_epochs * steps_per_epoch
    stop = total_steps if tc.max_steps is None else min(total_steps, tc.max_steps)
    if max_steps is not None:
        stop = min(stop, step + max_steps)

    model.train()
    while step < stop:
        epoch, pos = divmod(step, steps_per_epoch)
        perm = torch.randperm(n, generator=torch.Generator().manual_seed(tc.seed * 7_777 + epoch))
        idx = perm[pos * bs : (pos + 1) * bs]
        gen = torch.Generator().manual_seed(tc.seed * 1_000_003 + step)
        rgb, sparse, gt, valid = augment(rgb_all[idx], sparse_all[idx], gt_all[idx], valid_all[idx], gen, tc.flip, tc.jitter)

        lr = lr_at(step, tc, steps_per_epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        out = model(rgb, sparse)
        loss, bd = total_loss(out["depth"], out["global"], out["local"], gt, valid, cfg.loss)
        if not torch.isfinite(loss):
            dump = Path(dump_dir or tempfile.mkdtemp(prefix="emdc_nonfinite_")) / f"batch_step{step}.pt"
            torch.save({"rgb": rgb, "sparse": sparse, "gt": gt, "valid": valid, "indices": idx, "step": step}, dump)
            raise NonFiniteLossError(f"non-finite loss at step {step} ({bd.as_dict()}); batch dumped to {dump}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        ema.update(model)
        history.append({"step": step, "lr": lr, **bd.as_dict()})
        if log_every and step % log_every == 0:
            log.info("step %d lr %.2e total %.4f l1 %.4f", step, lr, bd.total, bd.l1_final)
        step += 1

    return Checkpoint(
        model=copy.deepcopy(model.state_dict()),
        ema=copy.deepcopy(ema.state_dict()),
        optimizer=copy.deepcopy(opt.state_dict()),
        step=step,
        config=config_to_dict(cfg),
        history=history,
    )


# ---------------------------------------------------------------- inference / evaluation


@torch.no_grad()
def predict(model: EMDC, rgb: np.ndarray, sparse: np.ndarray) -> np.ndarray:
    """Dense depth for one ``(H, W, 3)`` image and ``(H, W)`` sparse map, or stacked batches."""
    single = rgb.ndim == 3
    rgb_b = rgb[None] if single else rgb
    sp_b = sparse[None] if single else sparse
    dtype = next(model.parameters()).dtype
    r = torch.tensor(rgb_b, dtype=dtype).permute(0, 3, 1, 2)
    s = torch.tensor(sp_b, dtype=dtype)[:, None]
    was_training = model.training
    model.eval()
    out = model(r, s)["depth"][:, 0].double().numpy()
    model.train(was_training)
    return out[0] if single else out


def evaluate(model: EMDC, samples: list[Sample]) -> MetricReport:
    preds = predict(model, np.stack([s.rgb for s in samples]), np.stack([s.sparse for s in samples]))
    rows = [(s.id, p, s.gt, s.valid) for s, p in zip(samples, preds)]
    seqs = []
    for s in samples:
        if len(s.frames) >= 2:
            fp = predict(model, np.stack([s.rgb] * len(s.frames)), np.stack(s.frames))
            seqs.append((s.id, list(fp), s.gt, s.valid))
    return build_report(rows, seqs)


# ---------------------------------------------------------------- benchmark


def benchmark_propagation(presets=("s6", "s9"), size=(192, 256), repeats: int = 10, warmup: int = 2, batch: int = 1, seed: int = 0):
    """Wall-clock of the complete propagation module per preset, single-threaded.

    Returns rows of ``{preset, stages, iterations, mean_ms, std_ms}``.
    """
    if repeats < 5:
        raise ValueError("repeats must be >= 5 to report a standard deviation")
    h, w = size
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    rows = []
    try:
        for name in presets:
            sched = StageSchedule.preset(name) if isinstance(name, str) else name
            torch.manual_seed(seed)
            module = FCSPN(33, schedule=sched).eval()
            g = torch.Generator().manual_seed(seed)
            feats = torch.randn(batch, 33, h, w, generator=g)
            depth = 0.5 + 7.0 * torch.rand(batch, 1, h, w, generator=g)
            anchors = torch.where(torch.rand(batch, 1, h, w, generator=g) < 0.01, depth, torch.zeros_like(depth))
            times = []
            with torch.no_grad():
                for i in range(warmup + repeats):
                    t0 = time.perf_counter()
                    module(depth, feats, anchors)
                    dt = (time.perf_counter() - t0) * 1e3
                    if i >= warmup:
                        times.append(dt)
            rows.append(
                {
                    "preset": name if isinstance(name, str) else "custom",
                    "stages": len(sched),
                    "iterations": module.iterations_run,
                    "mean_ms": statistics.mean(times),
                    "std_ms": statistics.stdev(times),
                }
            )
    finally:
        torch.set_num_threads(prev_threads)
    return rows


# ---------------------------------------------------------------- ablations

ABLATION_FLAGS = ("fcspn_preset", "pixel_shuffle", "remove_bn_local", "relative", "rezero", "cgdl")

# same columns as the ablation table: (a) CSPN baseline ... (h) full model
ABLATION_ARMS = [
    {"name": "a", "fcspn_preset": "cspn", "pixel_shuffle": False, "remove_bn_local": False, "relative": False, "rezero": False, "cgdl": True},
    {"name": "b", "fcspn_preset": "s6", "pixel_shuffle": False, "remove_bn_local": False, "relative": False, "rezero": False, "cgdl": True},
    {"name": "c", "fcspn_preset": "s9", "pixel_shuffle": False, "remove_bn_local": False, "relative": False, "rezero": False, "cgdl": True},
    {"name": "d", "fcspn_preset": "s9", "pixel_shuffle": True, "remove_bn_local": False, "relative": False, "rezero": False, "cgdl": True},
    {"name": "e", "fcspn_preset": "s9", "pixel_shuffle": True, "remove_bn_local": True, "relative": False, "rezero": False, "cgdl": True},
    {"name": "f", "fcspn_preset": "s9", "pixel_shuffle": True, "remove_bn_local": True, "relative": True, "rezero": False, "cgdl": True},
    {"name": "g", "fcspn_preset": "s9", "pixel_shuffle": True, "remove_bn_local": True, "relative": True, "rezero": True, "cgdl": False},
    {"name": "h", "fcspn_preset": "s9", "pixel_shuffle": True, "remove_bn_local": True, "relative": True, "rezero": True, "cgdl": True},
]


def apply_flags(cfg: ExperimentConfig, flags: dict) -> ExperimentConfig:
    unknown = set(flags) - set(ABLATION_FLAGS) - {"name"}
    if unknown:
        raise KeyError(f"unknown ablation flags: {sorted(unknown)}")
    cfg = copy.deepcopy(cfg)
    if "fcspn_preset" in flags:
        cfg.fcspn.preset = flags["fcspn_preset"]
        StageSchedule.from_config(cfg.fcspn)
    if "pixel_shuffle" in flags:
        cfg.model.gldp.use_pixel_shuffle = bool(flags["pixel_shuffle"])
    if "remove_bn_local" in flags:
        cfg.model.gldp.use_batchnorm_local = not flags["remove_bn_local"]
    if "relative" in flags:
        cfg.fusion.relative = bool(flags["relative"])
    if "rezero" in flags:
        cfg.fusion.rezero = bool(flags["rezero"])
    if "cgdl" in flags:
        cfg.loss.cgdl = bool(flags["cgdl"])
    return cfg


def run_ablation(grid, train_set, eval_set, base_cfg: ExperimentConfig | None = None, max_steps: int | None = None):
    """Train and evaluate each flag set with identical seed and data.

    Returns ``{"columns": [...], "rows": [...]}`` with one row per arm holding
    its flags and metric summary.
    """
    base_cfg = base_cfg or ExperimentConfig()
    rows = []
    for i, flags in enumerate(grid):
        cfg = apply_flags(base_cfg, flags)
        ckpt = train(cfg, train_set, max_steps=max_steps)
        report = evaluate(ckpt.build_model(use_ema=True), eval_set)
        row = {"arm": flags.get("name", str(i))}
        row.update({k: flags.get(k) for k in ABLATION_FLAGS})
        row.update(report.summary())
        row["final_l1"] = ckpt.history[-1]["l1_final"] if ckpt.history else float("nan")
        rows.append(row)
        log.info("arm %s score %.4f", row["arm"], row["score"])
    columns = ["arm", *ABLATION_FLAGS, "rmae", "ewmae", "rds", "rtsd", "score", "final_l1"]
    return {"columns": columns, "rows": rows}


def format_table(report: dict) -> str:
    cols = report["columns"]
    lines = ["\t".join(cols)]
    for row in report["rows"]:
        lines.append("\t".join(f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in cols))
    return "\n".join(lines)
