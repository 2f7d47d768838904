"""Uniform horizontal partition branch: one global head plus N stripe heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import PooledHead


@dataclass
class HardOutputs:
    pre: dict[str, torch.Tensor]
    post: dict[str, torch.Tensor]
    global_map: torch.Tensor
    partition_maps: list[torch.Tensor]


def partition(c5: torch.Tensor, n: int) -> list[torch.Tensor]:
    """Split a ``... x h x w`` map into ``n`` equal stripes, top to bottom."""
    h = c5.shape[-2]
    if h % n:
        raise ValueError(f"feature height {h} not divisible into {n} partitions")
    return list(torch.split(c5, h // n, dim=-2))


class HardBranch(nn.Module):
    def __init__(self, in_channels: int, dim: int, n_parts: int = 2, tie_partition_heads: bool = False):
        super().__init__()
        self.n_parts = n_parts
        self.global_head = PooledHead(in_channels, dim)
        if tie_partition_heads:
            shared = PooledHead(in_channels, dim)
            self.part_heads = nn.ModuleList([shared] * n_parts)
        else:
            self.part_heads = nn.ModuleList(PooledHead(in_channels, dim) for _ in range(n_parts))

    def forward(self, c5: torch.Tensor) -> HardOutputs:
        g_map, g_pre, g_post = self.global_head(c5)
        pre, post = {"f_hard_g5": g_pre}, {"f_hard_g5": g_post}
        maps = []
        for i, (head, stripe) in enumerate(zip(self.part_heads, partition(c5, self.n_parts))):
            p_map, p_pre, p_post = head(stripe)
            name = f"f_hard_p{i + 1}"
            pre[name], post[name] = p_pre, p_post
            maps.append(p_map)
        return HardOutputs(pre, post, g_map, maps)
