"""Proposal image generator: a small residual U-Net over ResBlocks."""
from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import DimensionError, Downsample, Upsample, conv, head, res_stack


@dataclass
class PigConfig:
    widths: tuple = (16, 32, 64, 32, 16)
    blocks: int = 2

    def __post_init__(self):
        self.widths = tuple(self.widths)
        n = len(self.widths)
        if n % 2 == 0:
            raise ValueError("PIG needs an odd number of stages")
        if self.widths != self.widths[::-1]:
            raise ValueError("PIG widths must be symmetric")


class PIG(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or PigConfig()
        self.cfg = cfg
        w = cfg.widths
        self.depth = len(w) // 2
        self.embed = conv(3, w[0])
        self.stages = nn.ModuleList(res_stack(c, cfg.blocks) for c in w)
        self.down = nn.ModuleList(Downsample(w[i], w[i + 1]) for i in range(self.depth))
        self.up = nn.ModuleList(
            Upsample(w[i], w[i + 1]) for i in range(self.depth, len(w) - 1)
        )
        self.out = head(w[-1])

    def forward(self, img):
        h, wd = img.shape[-2:]
        f = 2 ** self.depth
        if h % f or wd % f:
            raise DimensionError(f"PIG input ({h}, {wd}) must be divisible by {f}")
        x = self.embed(img)
        skips = []
        for i in range(self.depth):
            x = self.stages[i](x)
            skips.append(x)
            x = self.down[i](x)
        x = self.stages[self.depth](x)
        for j, up in enumerate(self.up):
            x = up(x) + skips[-1 - j]
            x = self.stages[self.depth + 1 + j](x)
        return torch.clamp(img + self.out(x), 0.0, 1.0)
