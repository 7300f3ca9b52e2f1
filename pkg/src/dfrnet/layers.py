"""Shared building blocks: FFA-style ResBlock, pixel-shuffle resampling,
multi-scale embedding and restore blocks."""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class DimensionError(ValueError):
    """Raised when tensor shapes violate a block's contract."""


def conv(in_channels, out_channels, kernel_size=3, bias=True):
    return nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2, bias=bias)


def _hidden(channels, reduction):
    # LB stages run at width + C_L, which is rarely divisible by the ratio
    return max(1, channels // reduction)


def pixel_unshuffle(x, factor=2):
    """Space-to-channel. Output channel ``c * f*f + dy * f + dx`` holds input
    channel ``c`` at offset ``(dy, dx)`` of each ``f x f`` cell (row-major
    within the cell)."""
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"spatial dims ({h}, {w}) not divisible by {factor}")
    return F.pixel_unshuffle(x, factor)


def pixel_shuffle(x, factor=2):
    """Inverse of :func:`pixel_unshuffle`."""
    if x.shape[1] % (factor * factor):
        raise DimensionError(f"{x.shape[1]} channels not divisible by {factor * factor}")
    return F.pixel_shuffle(x, factor)


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=8):
        super().__init__()
        hidden = _hidden(channels, reduction)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        w = F.adaptive_avg_pool2d(x, 1)
        w = torch.sigmoid(self.fc2(F.relu(self.fc1(w))))
        return x * w


class PixelAttention(nn.Module):
    def __init__(self, channels, reduction=8):
        super().__init__()
        hidden = _hidden(channels, reduction)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, 1, 1)

    def forward(self, x):
        return x * torch.sigmoid(self.fc2(F.relu(self.fc1(x))))


class ResBlock(nn.Module):
    """FFA-Net basic block.

    conv -> ReLU (+ local skip) -> conv -> channel attention -> pixel attention,
    then the outer residual add. Shape preserving.
    """

    def __init__(self, channels, kernel_size=3, reduction=8):
        super().__init__()
        self.channels = channels
        self.conv1 = conv(channels, channels, kernel_size)
        self.conv2 = conv(channels, channels, kernel_size)
        self.ca = ChannelAttention(channels, reduction)
        self.pa = PixelAttention(channels, reduction)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise DimensionError(f"ResBlock expects {self.channels} channels, got {x.shape[1]}")
        res = F.relu(self.conv1(x)) + x
        res = self.conv2(res)
        res = self.pa(self.ca(res))
        return res + x


def res_stack(channels, n_blocks):
    return nn.Sequential(*[ResBlock(channels) for _ in range(n_blocks)])


class Downsample(nn.Module):
    """Pixel-unshuffle by 2, then a 1x1 conv 4C -> out."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.proj = nn.Conv2d(4 * in_channels, out_channels, 1)

    def forward(self, x):
        return self.proj(pixel_unshuffle(x))


class Upsample(nn.Module):
    """1x1 conv C -> 4*out, then pixel-shuffle by 2."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, 4 * out_channels, 1)

    def forward(self, x):
        return pixel_shuffle(self.proj(x))


class MultiScaleEmbed(nn.Module):
    """Parallel 3/5/7 convs to ``out_channels`` each, fused by a 1x1 conv."""

    def __init__(self, in_channels=3, out_channels=4, padding_mode="zeros"):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, out_channels, k, padding=k // 2, padding_mode=padding_mode)
            for k in (3, 5, 7)
        )
        self.fuse = nn.Conv2d(3 * out_channels, out_channels, 1)

    def forward(self, x):
        return self.fuse(torch.cat([b(x) for b in self.branches], dim=1))


class RestoreBlock(nn.Module):
    """``n_res`` ResBlocks and a 3x3 conv to a 3-channel residual image."""

    def __init__(self, channels, n_res=4):
        super().__init__()
        if n_res not in (2, 4):
            raise ValueError(f"n_res must be 2 or 4, got {n_res}")
        self.body = res_stack(channels, n_res)
        self.out = head(channels)

    def forward(self, x):
        return self.out(self.body(x))


def head(in_channels):
    """3x3 conv to a 3-channel residual image; initialised 10x smaller."""
    m = conv(in_channels, 3)
    m.head_scale = 0.1
    return m


def init_weights(module, generator=None):
    """Truncated-normal fan-in init (std 1/sqrt(fan_in)) for convs, zero biases.

    He scaling (gain 2) diverges through the 10-block stages once the outer
    residuals accumulate, so unit gain is used.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
            std = getattr(m, "head_scale", 1.0) / math.sqrt(fan_in)
            with torch.no_grad():
                w = torch.empty_like(m.weight)
                nn.init.trunc_normal_(w, std=std, a=-2 * std, b=2 * std, generator=generator)
                m.weight.copy_(w)
                if m.bias is not None:
                    m.bias.zero_()


def zero_parameters(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def count_params(module):
    return sum(p.numel() for p in module.parameters())
