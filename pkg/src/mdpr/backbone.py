"""Residual CNN with a shared stem and two independent stage-4/5 towers."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import BackboneSpec


@dataclass
class StageFeatures:
    c4: torch.Tensor
    c5: torch.Tensor
    branch: str


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


def make_stage(in_ch: int, out_ch: int, blocks: int, stride: int) -> nn.Sequential:
    layers = [BasicBlock(in_ch, out_ch, stride)]
    layers += [BasicBlock(out_ch, out_ch) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class Tower(nn.Module):
    """Stage 4 and stage 5 of one branch."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        w, b, s = spec.widths, spec.blocks, spec.strides
        self.stage4 = make_stage(w[2], w[3], b[3], s[3])
        self.stage5 = make_stage(w[3], w[4], b[4], s[4])

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        c4 = self.stage4(x)
        return c4, self.stage5(c4)


class DualBackbone(nn.Module):
    """Shared stages 1-3, then separate hard/soft towers.

    Both towers are built from the same spec but own their parameters; there
    is no weight tying. Stage 5 runs at stride 1 so C4 and C5 share spatial
    size.
    """

    def __init__(self, spec: BackboneSpec | None = None):
        super().__init__()
        self.spec = spec = spec or BackboneSpec()
        w, b, s = spec.widths, spec.blocks, spec.strides
        self.stem = nn.Sequential(
            make_stage(3, w[0], b[0], s[0]),
            make_stage(w[0], w[1], b[1], s[1]),
            make_stage(w[1], w[2], b[2], s[2]),
        )
        self.hard = Tower(spec)
        self.soft = Tower(spec)

    def forward(self, images: torch.Tensor) -> tuple[StageFeatures, StageFeatures]:
        stride = self.spec.total_stride
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W images, got {tuple(images.shape)}")
        if images.shape[2] % stride or images.shape[3] % stride:
            raise ValueError(
                f"image size {tuple(images.shape[2:])} not divisible by total stride {stride}"
            )
        shared = self.stem(images)
        h4, h5 = self.hard(shared)
        s4, s5 = self.soft(shared)
        return StageFeatures(h4, h5, "hard"), StageFeatures(s4, s5, "soft")

