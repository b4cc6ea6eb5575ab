"""Training objectives.

All functions take ``(B, 1, H, W)`` or ``(H, W)`` tensors.  The gradient
loss compares Sobel-Feldman responses of prediction and target, but only on
pixels whose whole 3x3 neighborhood is measured; pixels next to zero-filled
holes would otherwise contribute cliff gradients that do not exist in the
scene.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .config import LossConfig

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.t().contiguous()


class EmptyMaskError(ValueError):
    pass


def _as_4d(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x


def masked_l1(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = mask.bool()
    if not mask.any():
        raise EmptyMaskError("masked_l1 needs at least one valid pixel")
    return (pred - gt).abs()[mask].mean()


def erode(mask: torch.Tensor, se_radius: int = 1) -> torch.Tensor:
    """Binary erosion with a (2r+1)^2 square; outside the image counts as invalid."""
    if se_radius < 1:
        raise ValueError("se_radius must be >= 1")
    m = _as_4d(mask).to(torch.float32)
    k = 2 * se_radius + 1
    m = F.pad(m, (se_radius,) * 4, value=0.0)
    out = -F.max_pool2d(-m, kernel_size=k, stride=1)
    return out.reshape(mask.shape) > 0.5


def sobel(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Sobel-Feldman x/y responses with replicate padding, same shape as ``x``."""
    x4 = _as_4d(x)
    padded = F.pad(x4, (1, 1, 1, 1), mode="replicate")
    kx = _SOBEL_X.to(x4)[None, None]
    ky = _SOBEL_Y.to(x4)[None, None]
    gx = F.conv2d(padded, kx).reshape(x.shape)
    gy = F.conv2d(padded, ky).reshape(x.shape)
    return gx, gy


def gradient_difference(pred: torch.Tensor, gt: torch.Tensor, p_norm: float = 1.0) -> torch.Tensor:
    """Per-pixel p-norm of the (x, y) Sobel response difference."""
    px, py = sobel(pred)
    gx, gy = sobel(gt)
    dx, dy = (px - gx).abs(), (py - gy).abs()
    if p_norm == 1:
        return dx + dy
    return (dx**p_norm + dy**p_norm) ** (1.0 / p_norm)


def valid_range_mask(gt: torch.Tensor, valid_range: tuple[float, float]) -> torch.Tensor:
    lo, hi = valid_range
    return (gt >= lo) & (gt <= hi)


def corrected_gradient_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    valid_range: tuple[float, float] = (0.3, 8.0),
    p_norm: float = 1.0,
    se_radius: int = 1,
) -> torch.Tensor:
    lo, hi = valid_range
    if not lo < hi:
        raise ValueError("valid_range must satisfy lo < hi")
    mask = erode(valid_range_mask(gt, valid_range), se_radius)
    if not mask.any():
        raise EmptyMaskError("eroded validity mask is empty; skip the gradient term for this sample")
    return gradient_difference(pred, gt, p_norm)[mask].mean()


def adaptive_weights(l1_final, l1_global, l1_local, cgdl, cgdl_weight: float = 0.7):
    """Branch/gradient weights that make every weighted term equal the final-L1 value.

    Inputs may be tensors; values are detached so the ratios carry no gradient.
    A zero denominator gives a zero weight.
    """

    def val(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    f, g, l, c = val(l1_final), val(l1_global), val(l1_local), val(cgdl)
    lam1 = f / g if g > 0 else 0.0
    lam2 = f / l if l > 0 else 0.0
    lam3 = cgdl_weight * f / c if c > 0 else 0.0
    return lam1, lam2, lam3


@dataclass
class LossBreakdown:
    l1_final: float
    l1_global: float
    l1_local: float
    cgdl: float
    lambda1: float
    lambda2: float
    lambda3: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def combine_losses(l1_final, l1_global, l1_local, cgdl=None, cgdl_weight: float = 0.7):
    """Weighted total of the component losses; ``cgdl=None`` drops the gradient term.

    Returns ``(total, breakdown)``.  ``total`` keeps the graph of the
    components when they are tensors.
    """
    use_cgdl = cgdl is not None
    lam1, lam2, lam3 = adaptive_weights(l1_final, l1_global, l1_local, cgdl if use_cgdl else 0.0, cgdl_weight)
    total = l1_final + lam1 * l1_global + lam2 * l1_local
    if use_cgdl:
        total = total + lam3 * cgdl
    f = lambda x: float(x.detach()) if isinstance(x, torch.Tensor) else float(x)  # noqa: E731
    bd = LossBreakdown(
        l1_final=f(l1_final),
        l1_global=f(l1_global),
        l1_local=f(l1_local),
        cgdl=f(cgdl) if use_cgdl else 0.0,
        lambda1=lam1,
        lambda2=lam2,
        lambda3=lam3 if use_cgdl else 0.0,
        total=f(total),
    )
    return total, bd


def total_loss(pred_final, pred_g, pred_l, gt, valid_mask, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    mask = valid_mask.bool() & valid_range_mask(gt, cfg.valid_range)
    l1_final = masked_l1(pred_final, gt, mask)
    l1_g = masked_l1(pred_g, gt, mask)
    l1_l = masked_l1(pred_l, gt, mask)
    cg = None
    if cfg.cgdl:
        try:
            cg = corrected_gradient_loss(pred_final, gt, cfg.valid_range, cfg.p_norm, cfg.se_radius)
        except EmptyMaskError:
            cg = None
    return combine_losses(l1_final, l1_g, l1_l, cg, cfg.cgdl_weight)
