"""Evaluation metrics and the combined score.

The four metric definitions are this package's own choices (relative MAE,
edge-weighted MAE, relative global shift, relative temporal std); only the
score's linear combination is fixed.  Inputs are numpy arrays; every mean
is taken over the validity mask.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

SCORE_WEIGHTS = {"rmae": 1.8, "ewmae": 0.6, "rds": 3.0, "rtsd": 4.6}


def _prepare(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    if not mask.any():
        raise ValueError("metric mask is empty")
    return pred, gt, mask


def rmae(pred, gt, mask) -> float:
    pred, gt, mask = _prepare(pred, gt, mask)
    if np.any(gt[mask] <= 0):
        raise ValueError("rmae needs gt > 0 on the mask")
    return float(np.mean(np.abs(pred[mask] - gt[mask]) / gt[mask]))


def sobel_magnitude(x: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(x, axis=1, mode="nearest")
    gy = ndimage.sobel(x, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def ewmae(pred, gt, mask) -> float:
    """MAE with weights ``1 + |grad gt| / mean_mask |grad gt|``; uniform weights on flat GT."""
    pred, gt, mask = _prepare(pred, gt, mask)
    mag = sobel_magnitude(gt)[mask]
    mean_mag = mag.mean()
    w = 1.0 + mag / mean_mag if mean_mag > 0 else np.ones_like(mag)
    err = np.abs(pred[mask] - gt[mask])
    return float(np.sum(w * err) / np.sum(w))


def rds(pred, gt, mask) -> float:
    pred, gt, mask = _prepare(pred, gt, mask)
    return float(abs(np.mean(pred[mask] - gt[mask])) / np.mean(gt[mask]))


def rtsd(preds, gt, mask) -> float:
    """Mean over pixels of the population std across frames, over mean GT."""
    preds = [np.asarray(p, dtype=np.float64) for p in preds]
    if len(preds) < 2:
        raise ValueError("rtsd needs at least 2 frames")
    _, gt, mask = _prepare(preds[0], gt, mask)
    stack = np.stack(preds)
    # std is shift-invariant; centering on frame 0 makes identical frames exactly 0
    std = (stack - stack[0]).std(axis=0, ddof=0)
    return float(np.mean(std[mask]) / np.mean(gt[mask]))


def overall_score(rmae: float, ewmae: float, rds: float, rtsd: float) -> float:
    w = SCORE_WEIGHTS
    return 1.0 - w["rmae"] * rmae - w["ewmae"] * ewmae - w["rds"] * rds - w["rtsd"] * rtsd


@dataclass
class MetricReport:
    rmae: float
    ewmae: float
    rds: float
    rtsd: float
    score: float
    per_sample: list[dict] = field(default_factory=list)
    n_sequences: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("rmae", "ewmae", "rds", "rtsd", "score")}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2)


def build_report(samples, sequences=()) -> MetricReport:
    """Aggregate per-image metrics (mean over images) and per-sequence RTSD.

    ``samples``: iterable of ``(id, pred, gt, mask)``.
    ``sequences``: iterable of ``(id, [pred_t], gt, mask)``.  Without any
    sequence, RTSD is reported as 0 and ``n_sequences`` is 0.
    """
    rows = []
    for sid, pred, gt, mask in samples:
        rows.append({"id": sid, "rmae": rmae(pred, gt, mask), "ewmae": ewmae(pred, gt, mask), "rds": rds(pred, gt, mask)})
    if not rows:
        raise ValueError("no samples to evaluate")
    seq_vals = {}
    for sid, preds, gt, mask in sequences:
        seq_vals[sid] = rtsd(preds, gt, mask)
    for row in rows:
        if row["id"] in seq_vals:
            row["rtsd"] = seq_vals[row["id"]]
    agg = {k: float(np.mean([r[k] for r in rows])) for k in ("rmae", "ewmae", "rds")}
    agg["rtsd"] = float(np.mean(list(seq_vals.values()))) if seq_vals else 0.0
    return MetricReport(**agg, score=overall_score(**agg), per_sample=rows, n_sequences=len(seq_vals))
