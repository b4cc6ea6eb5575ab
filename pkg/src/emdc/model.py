"""The complete network: GLDP -> fusion -> FCSPN."""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import ExperimentConfig
from .fcspn import FCSPN
from .fusion import RelativeFusion
from .gldp import GLDP


class EMDC(nn.Module):
    def __init__(self, cfg: ExperimentConfig | None = None):
        super().__init__()
        self.cfg = cfg or ExperimentConfig()
        self.gldp = GLDP(self.cfg.model.gldp)
        gw = self.gldp.global_branch.width_at(0)
        self.fusion = RelativeFusion(self.gldp.feature_channels, self.cfg.fusion)
        self.fcspn = FCSPN(gw + self.cfg.model.gldp.local_width + 1, self.cfg.fcspn)

    def forward(self, rgb, sparse):
        g, l = self.gldp(rgb, sparse)
        feat_g, feat_l = g.features[0], l.features[0]
        fused, pair = self.fusion(g.depth, l.depth, g.conf_logit, l.conf_logit, feat_g, feat_l)
        features = torch.cat([feat_g, feat_l, fused], dim=1)
        final = self.fcspn(fused, features, anchors=sparse)
        return {"depth": final, "fused": fused, "global": g.depth, "local": l.depth, "confidence": pair}
