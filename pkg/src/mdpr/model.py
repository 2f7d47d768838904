"""The full dual-branch network."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import DualBackbone
from .config import RunConfig
from .fusion import FusionModule, Projector, mutual_distillation_loss
from .hard_branch import HardBranch
from .losses import LossReport, total_loss
from .soft_branch import AttentionStack, SoftBranch


@dataclass
class FeatureBundle:
    """Named head outputs of one forward pass.

    ``post`` holds BN outputs, ``pre`` the GeM outputs. BAP entries are
    ``B x K x M``; every other entry is ``B x D``.
    """

    pre: dict[str, torch.Tensor]
    post: dict[str, torch.Tensor]
    a5: AttentionStack
    a4: AttentionStack

    def names(self) -> list[str]:
        return list(self.post)


class MDPR(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.backbone.widths
        dim = cfg.embedding_size
        self.backbone = DualBackbone(cfg.backbone)
        self.hard = HardBranch(widths[4], dim, cfg.partition_count)
        self.soft = SoftBranch(widths[3], widths[4], dim, cfg.attention_count, cfg.use_guidance)
        self.fusion = FusionModule(dim) if cfg.use_fusion else None
        if cfg.use_distillation:
            self.hard_projector = Projector(dim)
            self.soft_projector = Projector(dim)
        else:
            self.hard_projector = self.soft_projector = None

    def forward(self, images: torch.Tensor) -> FeatureBundle:
        hard_feats, soft_feats = self.backbone(images)
        hard = self.hard(hard_feats.c5)
        soft = self.soft(soft_feats.c4, soft_feats.c5)
        pre = {**hard.pre, **soft.pre}
        post = {**hard.post, **soft.post}
        if self.fusion is not None:
            f_pre, f_post = self.fusion(hard.global_map, hard.partition_maps, soft.g4_map, soft.g5_map)
            pre["f_fusion"], post["f_fusion"] = f_pre, f_post
        return FeatureBundle(pre, post, soft.a5, soft.a4)

    def distillation(self, bundle: FeatureBundle) -> torch.Tensor | None:
        if self.hard_projector is None:
            return None
        src = bundle.post if self.cfg.distill_feature_stage == "post" else bundle.pre
        return mutual_distillation_loss(
            src["f_hard_g5"], src["f_soft_g5"], self.hard_projector, self.soft_projector
        )

    def loss(self, bundle: FeatureBundle, labels: torch.Tensor) -> LossReport:
        lc = self.cfg.loss
        feats = bundle.post if lc.feature_stage == "post" else bundle.pre
        hats = [bundle.pre["bap5"], bundle.pre["bap4"]]
        return total_loss(feats, hats, labels, lc, self.distillation(bundle))
