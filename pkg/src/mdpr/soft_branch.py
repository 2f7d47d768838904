"""Attention branch: K+1 softmax attention, bilinear attention pooling at
stages 4 and 5, stage-5 attention guiding stage-4 attention, global heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import PooledHead


@dataclass
class AttentionStack:
    """Softmax-normalized maps, ``B x (K+1) x h x w``; the last map is background."""

    maps: torch.Tensor
    stage: int

    @property
    def foreground(self) -> torch.Tensor:
        return self.maps[:, :-1]

    @property
    def background(self) -> torch.Tensor:
        return self.maps[:, -1]

    @property
    def count(self) -> int:
        return self.maps.shape[1] - 1


class AttentionGenerator(nn.Module):
    """Parallel 1x1 and 3x3 convs, summed, then BN and ReLU -> K+1 raw maps."""

    def __init__(self, in_channels: int, n_maps: int):
        super().__init__()
        self.in_channels = in_channels
        self.conv1 = nn.Conv2d(in_channels, n_maps + 1, kernel_size=1, bias=False)
        self.conv3 = nn.Conv2d(in_channels, n_maps + 1, kernel_size=3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(n_maps + 1)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.relu(self.bn(self.conv1(x) + self.conv3(x)))


def softmax_attention(raw: torch.Tensor, stage: int) -> AttentionStack:
    return AttentionStack(torch.softmax(raw, dim=1), stage)


def generate_attention(x: torch.Tensor, generator: AttentionGenerator, stage: int = 5) -> AttentionStack:
    return softmax_attention(generator(x), stage)


def bap(
    attention: torch.Tensor,
    features: torch.Tensor,
    heads: nn.ModuleList,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinear attention pooling with one embedding/GeM/BN head per map.

    ``attention`` is ``B x K x h x w`` (foreground maps only), ``features``
    is ``B x C x h x w``. Returns ``(hat, bn)``, each ``B x K x M``.
    """
    if attention.shape[-2:] != features.shape[-2:]:
        raise ValueError(
            f"attention size {tuple(attention.shape[-2:])} != feature size {tuple(features.shape[-2:])}"
        )
    if attention.shape[1] != len(heads):
        raise ValueError(f"{attention.shape[1]} attention maps but {len(heads)} heads")
    hats, bns = [], []
    for k, head in enumerate(heads):
        _, pre, post = head(attention[:, k : k + 1] * features)
        hats.append(pre)
        bns.append(post)
    return torch.stack(hats, dim=1), torch.stack(bns, dim=1)


def guided_attention(
    c4: torch.Tensor,
    a5: AttentionStack | None,
    guide_conv: nn.Module,
    generator4: AttentionGenerator,
) -> tuple[AttentionStack, torch.Tensor]:
    """Stage-4 attention from ``conv1x1(C4)`` concatenated with all stage-5 maps.

    Pass ``a5=None`` to generate from the projected C4 alone. Returns the
    stage-4 stack and the projected map.
    """
    c4_hat = guide_conv(c4)
    x = c4_hat
    if a5 is not None:
        maps = a5.maps
        if maps.shape[-2:] != c4_hat.shape[-2:]:
            maps = F.interpolate(maps, size=c4_hat.shape[-2:], mode="bilinear", align_corners=False)
        x = torch.cat([c4_hat, maps], dim=1)
    return softmax_attention(generator4(x), stage=4), c4_hat


@dataclass
class SoftOutputs:
    pre: dict[str, torch.Tensor]
    post: dict[str, torch.Tensor]
    a5: AttentionStack
    a4: AttentionStack
    g4_map: torch.Tensor
    g5_map: torch.Tensor
    c4_hat: torch.Tensor


class SoftBranch(nn.Module):
    def __init__(
        self,
        c4_channels: int,
        c5_channels: int,
        dim: int,
        n_maps: int = 2,
        use_guidance: bool = True,
        tie_bap_heads: bool = False,
    ):
        super().__init__()
        self.n_maps = n_maps
        self.use_guidance = use_guidance
        self.gen5 = AttentionGenerator(c5_channels, n_maps)
        self.guide = nn.Conv2d(c4_channels, c5_channels, kernel_size=1)
        extra = n_maps + 1 if use_guidance else 0
        self.gen4 = AttentionGenerator(c5_channels + extra, n_maps)
        self.bap5_heads = self._heads(c5_channels, dim, n_maps, tie_bap_heads)
        self.bap4_heads = self._heads(c5_channels, dim, n_maps, tie_bap_heads)
        self.g5_head = PooledHead(c5_channels, dim)
        self.g4_head = PooledHead(c5_channels, dim)

    @staticmethod
    def _heads(in_ch: int, dim: int, n: int, tied: bool) -> nn.ModuleList:
        if tied:
            return nn.ModuleList([PooledHead(in_ch, dim)] * n)
        return nn.ModuleList(PooledHead(in_ch, dim) for _ in range(n))

    def forward(self, c4: torch.Tensor, c5: torch.Tensor) -> SoftOutputs:
        a5 = generate_attention(c5, self.gen5, stage=5)
        bap5_hat, bap5 = bap(a5.foreground, c5, self.bap5_heads)

        a4, c4_hat = guided_attention(c4, a5 if self.use_guidance else None, self.guide, self.gen4)
        bap4_hat, bap4 = bap(a4.foreground, c4_hat, self.bap4_heads)

        g5_map, g5_pre, g5_post = self.g5_head(c5)
        g4_map, g4_pre, g4_post = self.g4_head(c4_hat)
        pre = {"f_soft_g5": g5_pre, "f_soft_g4": g4_pre, "bap5": bap5_hat, "bap4": bap4_hat}
        post = {"f_soft_g5": g5_post, "f_soft_g4": g4_post, "bap5": bap5, "bap4": bap4}
        return SoftOutputs(pre, post, a5, a4, g4_map, g5_map, c4_hat)
