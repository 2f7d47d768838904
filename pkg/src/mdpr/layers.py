"""Building blocks shared by the branches: embedding block and GeM pooling."""

from __future__ import annotations

import torch
import torch.nn as nn

GEM_EPS = 1e-6


def gem_pool(x: torch.Tensor, alpha: torch.Tensor | float, eps: float = GEM_EPS) -> torch.Tensor:
    """Generalized mean over the spatial dims of a ``B x C x H x W`` map.

    ``(mean(x ** alpha)) ** (1 / alpha)`` per channel. Inputs are clamped to
    ``eps`` from below so the fractional power stays differentiable at zero.
    """
    return x.clamp(min=eps).pow(alpha).mean(dim=(-2, -1)).pow(1.0 / alpha)


class GeM(nn.Module):
    def __init__(self, alpha: float = 3.0, eps: float = GEM_EPS, trainable: bool = True):
        super().__init__()
        self.alpha = nn.Parameter(torch.tensor(float(alpha)), requires_grad=trainable)
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gem_pool(x, self.alpha, self.eps)

    def extra_repr(self) -> str:
        return f"alpha={self.alpha.item():.4f}, eps={self.eps}"


class EmbeddingBlock(nn.Sequential):
    """1x1 conv -> BN -> ReLU, mapping ``in_channels`` to the embedding size."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


def bn_neck(dim: int) -> nn.BatchNorm1d:
    bn = nn.BatchNorm1d(dim)
    bn.bias.requires_grad_(False)
    return bn


class PooledHead(nn.Module):
    """Embedding -> GeM -> BN on one feature map.

    Returns ``(embedded_map, pre_bn, post_bn)``.
    """

    def __init__(self, in_channels: int, dim: int):
        super().__init__()
        self.embed = EmbeddingBlock(in_channels, dim)
        self.pool = GeM()
        self.bn = bn_neck(dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        emb = self.embed(x)
        pre = self.pool(emb)
        return emb, pre, self.bn(pre)
