"""Confidence-weighted fusion of the global and local depth predictions."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import FusionConfig


@dataclass
class ConfidencePair:
    logit_g: torch.Tensor
    logit_l: torch.Tensor
    alpha: torch.Tensor
    weight_g: torch.Tensor
    weight_l: torch.Tensor


def _check_shapes(*grids):
    shape = grids[0].shape
    for g in grids[1:]:
        if g.shape != shape:
            raise ValueError(f"fusion inputs must share one shape, got {tuple(shape)} and {tuple(g.shape)}")


def fuse(pred_g, pred_l, logit_g, logit_l, alpha):
    """Blend with a two-way softmax over ``(logit_g, alpha * logit_l)``.

    At ``alpha == 0`` the local logit has no influence on the output.
    """
    _check_shapes(pred_g, pred_l, logit_g, logit_l)
    alpha = torch.as_tensor(alpha, dtype=logit_g.dtype, device=logit_g.device)
    if not torch.isfinite(alpha).all():
        raise ValueError("alpha must be finite")
    logits = torch.stack([logit_g, alpha * logit_l], dim=0)
    w = torch.softmax(logits, dim=0)
    fused = w[0] * pred_g + w[1] * pred_l
    return fused, ConfidencePair(logit_g, logit_l, alpha, w[0], w[1])


def fuse_legacy(pred_g, pred_l, conf_g, conf_l):
    """Softmax over independently predicted absolute confidences."""
    _check_shapes(pred_g, pred_l, conf_g, conf_l)
    w = torch.softmax(torch.stack([conf_g, conf_l], dim=0), dim=0)
    return w[0] * pred_g + w[1] * pred_l


class RelativeFusion(nn.Module):
    """Fusion head.

    With ``relative=True`` both confidence logits are produced jointly from
    the two branches' full-resolution features and predictions, and the
    local logit is gated by a scalar ``alpha`` (zero-initialized when
    ``rezero=True``, fixed at 1 otherwise).  With ``relative=False`` each
    branch's own confidence output is used directly.
    """

    def __init__(self, in_channels: int, cfg: FusionConfig | None = None):
        super().__init__()
        self.cfg = cfg or FusionConfig()
        if self.cfg.relative:
            self.head = nn.Sequential(
                nn.Conv2d(in_channels + 2, 16, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(16, 2, 3, padding=1),
            )
            if self.cfg.rezero:
                self.alpha = nn.Parameter(torch.zeros(()))
            else:
                self.register_buffer("alpha", torch.ones(()))

    def forward(self, pred_g, pred_l, conf_g, conf_l, feat_g, feat_l):
        if not self.cfg.relative:
            fused = fuse_legacy(pred_g, pred_l, conf_g, conf_l)
            w = torch.softmax(torch.stack([conf_g, conf_l], 0), 0)
            return fused, ConfidencePair(conf_g, conf_l, torch.ones(()), w[0], w[1])
        logits = self.head(torch.cat([feat_g, feat_l, pred_g, pred_l], dim=1))
        return fuse(pred_g, pred_l, logits[:, :1], logits[:, 1:], self.alpha)
