"""Mutual distillation between the branches and the feature fusion tower."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import GeM, bn_neck


class Projector(nn.Sequential):
    """Linear -> BN -> ReLU -> Linear, ``dim`` to ``dim``."""

    def __init__(self, dim: int, hidden: int | None = None):
        hidden = hidden or dim
        super().__init__(
            nn.Linear(dim, hidden),
            nn.BatchNorm1d(hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, dim),
        )


def negative_cosine(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Row-wise ``-cos(p, z)`` averaged over the batch."""
    return -F.cosine_similarity(p, z, dim=-1, eps=0.0).mean()


def _check_nonzero(x: torch.Tensor, name: str) -> None:
    if bool((x.detach().norm(dim=-1) == 0).any()):
        raise ValueError(f"zero-norm feature in {name}")


def distillation_from_projections(
    proj_hard: torch.Tensor,
    proj_soft: torch.Tensor,
    f_hard: torch.Tensor,
    f_soft: torch.Tensor,
) -> torch.Tensor:
    """``0.5 * (D(proj_hard, sg(f_soft)) + D(proj_soft, sg(f_hard)))``.

    The targets are detached: no gradient reaches a branch through the role
    of its feature as a target.
    """
    for x, name in (
        (proj_hard, "projected f_hard_g5"),
        (proj_soft, "projected f_soft_g5"),
        (f_hard, "f_hard_g5"),
        (f_soft, "f_soft_g5"),
    ):
        _check_nonzero(x, name)
    return 0.5 * (negative_cosine(proj_hard, f_soft.detach()) + negative_cosine(proj_soft, f_hard.detach()))


def mutual_distillation_loss(
    f_hard: torch.Tensor,
    f_soft: torch.Tensor,
    hard_projector: nn.Module,
    soft_projector: nn.Module,
) -> torch.Tensor:
    return distillation_from_projections(hard_projector(f_hard), soft_projector(f_soft), f_hard, f_soft)


class FusionBlock(nn.Module):
    """1x1 conv -> 3x3 conv -> BN -> ReLU; spatial size is preserved."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=False)
        self.conv3 = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.relu(self.bn(self.conv3(self.conv1(x))))


class FusionModule(nn.Module):
    """Merge embedded maps within each branch, then across branches.

    Hard branch: stripes are re-stacked along height and concatenated with
    the global embedded map (2M channels). Soft branch: the embedded
    projected-C4 and C5 maps are concatenated (2M channels). Both go through
    their own 2M->2M block, are concatenated, and pass a 4M->4M block, GeM
    and BN.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.hard_block = FusionBlock(2 * dim, 2 * dim)
        self.soft_block = FusionBlock(2 * dim, 2 * dim)
        self.final_block = FusionBlock(4 * dim, 4 * dim)
        self.pool = GeM()
        self.bn = bn_neck(4 * dim)

    def forward(
        self,
        hard_global: torch.Tensor,
        hard_parts: list[torch.Tensor],
        soft_g4: torch.Tensor,
        soft_g5: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        stacked = torch.cat(hard_parts, dim=-2)
        if stacked.shape != hard_global.shape:
            raise ValueError(f"partition maps stack to {tuple(stacked.shape)}, expected {tuple(hard_global.shape)}")
        if soft_g4.shape[-2:] != soft_g5.shape[-2:] or soft_g5.shape[-2:] != hard_global.shape[-2:]:
            raise ValueError("embedded maps disagree in spatial size")
        hard = self.hard_block(torch.cat([hard_global, stacked], dim=1))
        soft = self.soft_block(torch.cat([soft_g4, soft_g5], dim=1))
        fused = self.final_block(torch.cat([hard, soft], dim=1))
        pre = self.pool(fused)
        return pre, self.bn(pre)
