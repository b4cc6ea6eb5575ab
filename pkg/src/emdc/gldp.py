"""Global/local two-branch depth prediction.

The global branch is a U-Net over RGB + sparse depth + sample mask with an
inverted-bottleneck encoder (stride 2 per level) and a pixel-shuffle
decoder.  The local branch is a short BN-free conv stack on sparse depth at
full resolution.  At the configured decoder levels the branches exchange
1x1-projected copies of each other's features.

Stride level ``k`` means resolution ``H / 2**k``; level 0 is full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import GldpConfig


@dataclass
class BranchOutput:
    depth: torch.Tensor
    conf_logit: torch.Tensor
    features: dict[int, torch.Tensor] = field(default_factory=dict)


def pixel_shuffle(x: torch.Tensor, r: int = 2) -> torch.Tensor:
    return F.pixel_shuffle(x, r)


class InvertedResidual(nn.Module):
    def __init__(self, cin, cout, stride, expand):
        super().__init__()
        hidden = cin * expand
        self.use_res = stride == 1 and cin == cout
        self.block = nn.Sequential(
            nn.Conv2d(cin, hidden, 1, bias=False),
            nn.BatchNorm2d(hidden),
            nn.ReLU6(inplace=True),
            nn.Conv2d(hidden, hidden, 3, stride=stride, padding=1, groups=hidden, bias=False),
            nn.BatchNorm2d(hidden),
            nn.ReLU6(inplace=True),
            nn.Conv2d(hidden, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        )

    def forward(self, x):
        y = self.block(x)
        return x + y if self.use_res else y


class UpBlock(nn.Module):
    """x2 upsampling, skip addition and a 3x3 refinement conv."""

    def __init__(self, cin, cout, use_pixel_shuffle):
        super().__init__()
        if use_pixel_shuffle:
            self.up = nn.Sequential(nn.Conv2d(cin, cout * 4, 3, padding=1), nn.PixelShuffle(2), nn.ReLU(inplace=True))
        else:
            self.up = nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True)
            )
        self.refine = nn.Sequential(nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True))

    def forward(self, x, skip):
        return self.refine(self.up(x) + skip)


def _depth_head(cin):
    return nn.Conv2d(cin, 2, 3, padding=1)


def _split_head(out):
    return F.softplus(out[:, :1]), out[:, 1:]


class GlobalBranch(nn.Module):
    def __init__(self, cfg: GldpConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.encoder_widths
        self.levels = len(widths)
        self.stem = nn.Sequential(nn.Conv2d(5, widths[0], 3, padding=1), nn.ReLU(inplace=True))
        enc = []
        cin = widths[0]
        for w in widths:
            enc.append(nn.Sequential(InvertedResidual(cin, w, 2, cfg.expand_ratio), InvertedResidual(w, w, 1, cfg.expand_ratio)))
            cin = w
        self.encoder = nn.ModuleList(enc)
        # decoder[k] maps level k+1 to level k
        self.decoder = nn.ModuleList(
            UpBlock(self.width_at(k + 1), self.width_at(k), cfg.use_pixel_shuffle) for k in range(self.levels)
        )
        self.head = _depth_head(self.width_at(0))

    def width_at(self, level: int) -> int:
        return self.cfg.encoder_widths[max(level - 1, 0)]

    def check_input(self, h, w):
        f = 2**self.levels
        if h % f or w % f:
            raise ValueError(f"input {h}x{w} not divisible by 2**{self.levels}={f} ({self.levels} encoder levels)")

    def encode(self, x):
        skips = {0: self.stem(x)}
        y = skips[0]
        for k, block in enumerate(self.encoder, start=1):
            y = block(y)
            skips[k] = y
        return skips

    def decode_level(self, k, y, skips):
        return self.decoder[k](y, skips[k])


class LocalBranch(nn.Module):
    def __init__(self, cfg: GldpConfig):
        super().__init__()
        w = cfg.local_width

        def layer(cin):
            mods = [nn.Conv2d(cin, w, 3, padding=1)]
            if cfg.use_batchnorm_local:
                mods.append(nn.BatchNorm2d(w))
            mods.append(nn.ReLU(inplace=True))
            return nn.Sequential(*mods)

        n_a = cfg.local_layers // 2
        self.pre = nn.Sequential(*[layer(2 if i == 0 else w) for i in range(n_a)])
        self.post = nn.Sequential(*[layer(w) for _ in range(cfg.local_layers - n_a)])
        self.head = _depth_head(w)


class Exchange(nn.Module):
    """Bidirectional 1x1-projected additive feature exchange at one stride level."""

    def __init__(self, level, global_ch, local_ch):
        super().__init__()
        self.level = level
        self.l2g = nn.Conv2d(local_ch, global_ch, 1)
        self.g2l = nn.Conv2d(global_ch, local_ch, 1)

    def forward(self, fg, fl):
        f = 2**self.level
        lg = self.l2g(F.avg_pool2d(fl, f) if f > 1 else fl)
        gl = self.g2l(fg)
        if f > 1:
            gl = F.interpolate(gl, scale_factor=f, mode="nearest")
        if lg.shape[-2:] != fg.shape[-2:] or gl.shape[-2:] != fl.shape[-2:]:
            raise ValueError(f"exchange at level {self.level}: resolution mismatch {tuple(fg.shape)} vs {tuple(fl.shape)}")
        return fg + lg, fl + gl


def exchange(features_g, features_l, level, module: Exchange | None = None):
    if module is None:
        return features_g, features_l
    if module.level != level:
        raise ValueError(f"exchange module is for level {module.level}, not {level}")
    return module(features_g, features_l)


class GLDP(nn.Module):
    def __init__(self, cfg: GldpConfig | None = None):
        super().__init__()
        self.cfg = cfg or GldpConfig()
        self.global_branch = GlobalBranch(self.cfg)
        self.local_branch = LocalBranch(self.cfg)
        self.exchanges = nn.ModuleDict(
            {
                str(k): Exchange(k, self.global_branch.width_at(k), self.cfg.local_width)
                for k in sorted(set(self.cfg.exchange_points))
            }
        )

    @property
    def feature_channels(self) -> int:
        return self.global_branch.width_at(0) + self.cfg.local_width

    def forward(self, rgb, sparse):
        """``rgb`` (B,3,H,W), ``sparse`` (B,1,H,W) with 0 = no sample."""
        gb, lb = self.global_branch, self.local_branch
        gb.check_input(*rgb.shape[-2:])
        mask = (sparse > 0).to(sparse.dtype)
        skips = gb.encode(torch.cat([rgb, sparse, mask], dim=1))
        fl = lb.pre(torch.cat([sparse, mask], dim=1))

        y = skips[gb.levels]
        feats_g = {gb.levels: y}
        if str(gb.levels) in self.exchanges:
            y, fl = self.exchanges[str(gb.levels)](y, fl)
        for k in range(gb.levels - 1, -1, -1):
            y = gb.decode_level(k, y, skips)
            if str(k) in self.exchanges:
                y, fl = self.exchanges[str(k)](y, fl)
            feats_g[k] = y
        fl = lb.post(fl)

        dg, cg = _split_head(gb.head(y))
        dl, cl = _split_head(lb.head(fl))
        return BranchOutput(dg, cg, feats_g), BranchOutput(dl, cl, {0: fl})


def global_forward(model: GLDP, rgb, sparse) -> BranchOutput:
    return model(rgb, sparse)[0]


def local_forward(model: GLDP, sparse, rgb=None) -> BranchOutput:
    if rgb is None:
        rgb = torch.zeros(sparse.shape[0], 3, *sparse.shape[-2:], dtype=sparse.dtype, device=sparse.device)
    return model(rgb, sparse)[1]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
