"""Funnel convolutional spatial propagation.

Depth is refined in stages.  Each stage runs a few propagation iterations;
every iteration propagates with one 3x3 kernel per dilation and blends the
per-dilation results with per-pixel mixing weights.  The largest dilation
never grows from one stage to the next.  Kernels for stage ``k + 1`` come
from the stage-``k`` kernels and the current depth only, via a small
reweighting head; backbone features are read once, for stage 1.

Neighbor weights are non-negative and sum to at most ``1 - eps``; the
center weight closes the sum to exactly 1, so every update is a convex
combination of the previous depth values.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import FcspnConfig

# 3x3 neighborhood minus center, (dy, dx) in units of the dilation
OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]

PRESETS: dict[str, list[tuple[tuple[int, ...], int]]] = {
    "s6": [
        ((8, 4, 2, 1), 3),
        ((8, 4, 2, 1), 3),
        ((4, 2, 1), 3),
        ((4, 2, 1), 2),
        ((2, 1), 2),
        ((1,), 2),
    ],
    "s9": [
        ((8, 4, 2, 1), 3),
        ((8, 4, 2, 1), 3),
        ((8, 4, 2, 1), 3),
        ((4, 2, 1), 2),
        ((4, 2, 1), 2),
        ((4, 2, 1), 2),
        ((2, 1), 2),
        ((2, 1), 2),
        ((1,), 2),
    ],
    # single-stage, fixed-kernel baseline with the same iteration budget as s9
    "cspn": [((1,), 21)],
    "none": [],
}


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple[tuple[tuple[int, ...], int], ...]

    def __post_init__(self):
        prev_max = None
        for i, (dilations, iters) in enumerate(self.stages):
            if not dilations:
                raise ValueError(f"stage {i} has no dilations")
            if any(d < 1 for d in dilations):
                raise ValueError(f"stage {i}: dilations must be positive integers")
            if list(dilations) != sorted(dilations, reverse=True) or len(set(dilations)) != len(dilations):
                raise ValueError(f"stage {i}: dilations must be strictly descending, got {dilations}")
            if iters < 1:
                raise ValueError(f"stage {i}: iterations must be >= 1")
            if prev_max is not None and max(dilations) > prev_max:
                raise ValueError(
                    f"stage {i}: max dilation {max(dilations)} exceeds previous stage's {prev_max} (funnel violated)"
                )
            prev_max = max(dilations)

    @classmethod
    def from_list(cls, stages) -> "StageSchedule":
        return cls(tuple((tuple(int(d) for d in dil), int(it)) for dil, it in stages))

    @classmethod
    def preset(cls, name: str) -> "StageSchedule":
        if name not in PRESETS:
            raise KeyError(f"unknown FCSPN preset {name!r}; choose from {sorted(PRESETS)}")
        return cls.from_list(PRESETS[name])

    @classmethod
    def from_config(cls, cfg: FcspnConfig) -> "StageSchedule":
        if cfg.preset == "custom":
            if cfg.schedule is None:
                raise ValueError("fcspn.preset 'custom' requires fcspn.schedule")
            return cls.from_list(cfg.schedule)
        return cls.preset(cfg.preset)

    @property
    def total_iterations(self) -> int:
        return sum(it for _, it in self.stages)

    def __len__(self) -> int:
        return len(self.stages)


@dataclass
class AffinityField:
    """Kernels for one stage: ``kernels`` is ``(B, D, 8, H, W)`` raw non-negative weights."""

    dilations: tuple[int, ...]
    kernels: torch.Tensor
    mix_logits: torch.Tensor  # (B, D, H, W)
    eps: float = 1e-2

    def neighbor_weights(self) -> torch.Tensor:
        raw = self.kernels.abs()
        total = raw.sum(dim=2, keepdim=True)
        cap = 1.0 - self.eps
        return raw * (cap / torch.clamp(total, min=cap))

    def center_weights(self) -> torch.Tensor:
        return 1.0 - self.neighbor_weights().sum(dim=2)

    def mixing_weights(self) -> torch.Tensor:
        return torch.softmax(self.mix_logits, dim=1)


def check_normalized(weights: torch.Tensor, tol: float = 1e-6) -> None:
    if (weights < 0).any():
        raise ValueError("neighbor weights must be non-negative")
    if (weights.sum(dim=-3) > 1.0 + tol).any():
        raise ValueError("neighbor weights sum above 1; field is not normalized")


def _shifted_neighbors(depth: torch.Tensor, dilation: int) -> torch.Tensor:
    """Return ``(B, 8, H, W)`` neighbor values with replicate padding."""
    b, _, h, w = depth.shape
    d = dilation
    if d >= h or d >= w:
        # replicate padding wider than the image: clamp indices instead
        ys = torch.arange(h, device=depth.device)
        xs = torch.arange(w, device=depth.device)
        out = []
        for dy, dx in OFFSETS:
            iy = (ys + dy * d).clamp(0, h - 1)
            ix = (xs + dx * d).clamp(0, w - 1)
            out.append(depth[:, 0][:, iy][:, :, ix])
        return torch.stack(out, dim=1)
    return _window(depth, d)[:, _NEIGHBOR_IDX]


# unfold orders the 3x3 window row-major; index 4 is the center
_NEIGHBOR_IDX = [0, 1, 2, 3, 5, 6, 7, 8]


def _window(depth: torch.Tensor, d: int) -> torch.Tensor:
    """Full ``(B, 9, H, W)`` dilated 3x3 window, center included."""
    b, _, h, w = depth.shape
    if d >= h or d >= w:
        nb = _shifted_neighbors(depth, d)
        return torch.cat([nb[:, :4], depth, nb[:, 4:]], dim=1)
    padded = F.pad(depth, (d, d, d, d), mode="replicate")
    return F.unfold(padded, kernel_size=3, dilation=d).reshape(b, 9, h, w)


def propagate_once(depth, neighbor_weights, dilation, anchors=None, anchor_mask=None, anchor_mode=False):
    """One propagation step with a single dilated 3x3 kernel.

    ``depth`` is ``(B, 1, H, W)``, ``neighbor_weights`` ``(B, 8, H, W)``.
    Written as ``x + sum_n w_n (x_n - x)``, identical to
    ``center * x + sum_n w_n x_n`` with ``center = 1 - sum_n w_n``; this
    form keeps constant maps exactly fixed in floating point.
    """
    check_normalized(neighbor_weights)
    nb = _shifted_neighbors(depth, dilation)
    out = depth + (neighbor_weights * (nb - depth)).sum(dim=1, keepdim=True)
    if anchor_mode and anchors is not None:
        out = torch.where(anchor_mask, anchors, out)
    return out


def stage_fuse(depth, field: AffinityField, iterations: int, anchors=None, anchor_mask=None, anchor_mode=False, counter=None):
    """Run ``iterations`` propagation steps, blending the dilations with the mixing weights.

    Blending ``propagate_once`` results with weights that sum to one equals
    a single update whose neighbor weights are pre-multiplied by the mixing
    weights, which is what is computed here.  Anchors are re-injected after
    the blend; every per-dilation result already carries them, so the two
    orders agree.
    """
    weights = field.neighbor_weights()
    check_normalized(weights)
    mix = field.mixing_weights()
    combined = weights * mix[:, :, None]
    # zero weight on each window center so the unfolded 3x3 window can be used as is
    zero = torch.zeros_like(combined[:, :, :1])
    combined = torch.cat([combined[:, :, :4], zero, combined[:, :, 4:]], dim=2).flatten(1, 2)  # (B, 9D, H, W)
    for _ in range(iterations):
        nb = torch.cat([_window(depth, d) for d in field.dilations], dim=1)
        depth = depth + (combined * (nb - depth)).sum(dim=1, keepdim=True)
        if anchor_mode and anchors is not None:
            depth = torch.where(anchor_mask, anchors, depth)
        if counter is not None:
            counter[0] += 1
    return depth


def _nearest_index(prev: tuple[int, ...], target: int) -> int:
    return min(range(len(prev)), key=lambda i: (abs(prev[i] - target), prev[i]))


class AffinityHead(nn.Module):
    """Stage-1 kernels from backbone features."""

    def __init__(self, in_channels: int, dilations: tuple[int, ...], hidden: int = 16, eps: float = 1e-2):
        super().__init__()
        self.dilations = tuple(dilations)
        self.eps = eps
        n = len(self.dilations)
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 9 * n, 3, padding=1),
        )

    def forward(self, features: torch.Tensor) -> AffinityField:
        out = self.net(features)
        b, _, h, w = out.shape
        n = len(self.dilations)
        kernels = torch.sigmoid(out[:, : 8 * n]).reshape(b, n, 8, h, w)
        return AffinityField(self.dilations, kernels, out[:, 8 * n :], self.eps)


def init_affinities(features, schedule: StageSchedule, head: AffinityHead) -> AffinityField:
    if head.dilations != schedule.stages[0][0]:
        raise ValueError("affinity head dilations do not match the first stage")
    return head(features)


class ReweightHead(nn.Module):
    """Multiplicative kernel corrections from previous kernels and current depth.

    Input channels: ``1 + 8 * D_prev + D_prev``.  The final convolution is
    zero-initialized so the corrections start at exactly 1.
    """

    def __init__(self, prev_dilations, next_dilations, hidden: int = 16, eps: float = 1e-2):
        super().__init__()
        self.prev_dilations = tuple(prev_dilations)
        self.next_dilations = tuple(next_dilations)
        self.eps = eps
        n_prev, n_next = len(self.prev_dilations), len(self.next_dilations)
        self.in_channels = 1 + 8 * n_prev + n_prev
        self.net = nn.Sequential(
            nn.Conv2d(self.in_channels, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 9 * n_next, 3, padding=1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)
        self.select = [_nearest_index(self.prev_dilations, d) for d in self.next_dilations]

    def corrections(self, prev: AffinityField, depth: torch.Tensor):
        b, n, _, h, w = prev.kernels.shape
        x = torch.cat([depth, prev.kernels.reshape(b, 8 * n, h, w), prev.mix_logits], dim=1)
        out = self.net(x)
        m = len(self.next_dilations)
        kernel_corr = 2.0 * torch.sigmoid(out[:, : 8 * m]).reshape(b, m, 8, h, w)
        logit_corr = out[:, 8 * m :]
        return kernel_corr, logit_corr

    def combine(self, prev: AffinityField, kernel_corr, logit_corr) -> AffinityField:
        idx = self.select
        kernels = prev.kernels[:, idx] * kernel_corr
        logits = prev.mix_logits[:, idx] + logit_corr
        return AffinityField(self.next_dilations, kernels, logits, self.eps)

    def forward(self, prev: AffinityField, depth: torch.Tensor) -> AffinityField:
        return self.combine(prev, *self.corrections(prev, depth))


def reweight_kernels(prev_field: AffinityField, current_depth, head: ReweightHead) -> AffinityField:
    return head(prev_field, current_depth)


class FCSPN(nn.Module):
    def __init__(self, feature_channels: int, cfg: FcspnConfig | None = None, schedule: StageSchedule | None = None):
        super().__init__()
        self.cfg = cfg or FcspnConfig()
        self.schedule = schedule if schedule is not None else StageSchedule.from_config(self.cfg)
        stages = self.schedule.stages
        self.affinity = AffinityHead(feature_channels, stages[0][0], self.cfg.hidden, self.cfg.eps) if stages else None
        self.reweight = nn.ModuleList(
            ReweightHead(stages[i][0], stages[i + 1][0], self.cfg.hidden, self.cfg.eps) for i in range(len(stages) - 1)
        )
        self.iterations_run = 0
        self.fields: list[AffinityField] = []

    def forward(self, depth, features, anchors=None, anchor_mode: bool | None = None):
        """Refine ``depth`` ``(B,1,H,W)``; ``anchors`` is the sparse map (0 = no sample)."""
        anchor_mode = self.cfg.anchor if anchor_mode is None else anchor_mode
        anchor_mask = anchors > 0 if anchors is not None else None
        counter = [0]
        self.fields = []
        if not self.schedule.stages:
            self.iterations_run = 0
            return depth
        field = init_affinities(features, self.schedule, self.affinity)
        for k, (_, iters) in enumerate(self.schedule.stages):
            self.fields.append(field)
            depth = stage_fuse(depth, field, iters, anchors, anchor_mask, anchor_mode, counter)
            if k < len(self.reweight):
                field = reweight_kernels(field, depth, self.reweight[k])
        self.iterations_run = counter[0]
        return depth


def fcspn_refine(fused, features, anchors, schedule: StageSchedule, anchor_mode: bool, module: FCSPN | None = None):
    module = module or FCSPN(features.shape[1], FcspnConfig(anchor=anchor_mode), schedule)
    return module(fused, features, anchors, anchor_mode)
