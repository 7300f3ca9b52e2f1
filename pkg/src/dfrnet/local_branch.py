"""Local branch: residual-driven local density features, split-and-merge
encoder, density-aware decoder fusion and intermediate residual feedback."""
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import (
    ChannelAttention,
    DimensionError,
    Downsample,
    MultiScaleEmbed,
    RestoreBlock,
    Upsample,
    conv,
    res_stack,
)

LEAK = 0.2


@dataclass
class LbConfig:
    widths: tuple = (32, 64, 128, 256, 128, 64, 32)
    blocks: tuple = (4, 6, 8, 10, 6, 8, 8)
    local_channels: int = 4
    # 1-based stage indices followed by an IDRF module
    idrf_stages: tuple = (1, 2, 3, 4, 5, 6)
    restore_blocks: int = 4
    # depth of the 3x3 conv body inside each CSDA; 0 leaves pure attention
    csda_convs: int = 3

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.blocks = tuple(self.blocks)
        self.idrf_stages = tuple(sorted(self.idrf_stages))
        if len(self.widths) != 7 or len(self.blocks) != 7:
            raise ValueError("local branch has exactly 7 stages")
        if self.widths != self.widths[::-1]:
            raise ValueError("local branch widths must be symmetric")
        if any(s < 1 or s > 6 for s in self.idrf_stages):
            raise ValueError("IDRF may only follow stages 1-6")

    def stage_channels(self, s):
        """Channels entering/leaving 0-based stage ``s``: image width + C_L."""
        return self.widths[s] + self.local_channels


def split(x, local_channels):
    return x[:, :-local_channels], x[:, -local_channels:]


class LocalEmbed(nn.Module):
    """Shallow image feature by a 3x3 conv, local feature by a multi-scale conv."""

    def __init__(self, width, local_channels, use_dr=True):
        super().__init__()
        self.use_dr = use_dr
        # without the dehazing residual the image path sees I and P concatenated
        self.image = conv(3 if use_dr else 6, width)
        self.local = MultiScaleEmbed(3, local_channels)

    def forward(self, img, proposal):
        if img.shape != proposal.shape:
            raise DimensionError(f"embed inputs differ in shape: {tuple(img.shape)} vs {tuple(proposal.shape)}")
        if self.use_dr:
            return self.image(img), self.local(proposal - img)
        return self.image(torch.cat([img, proposal], 1)), self.local(torch.zeros_like(img))


class SplitMerge(nn.Module):
    """Split the stage output, merge the image part with the global feature
    and downsample image and local parts separately."""

    def __init__(self, width, next_width, local_channels):
        super().__init__()
        self.width = width
        self.local_channels = local_channels
        self.image_down = Downsample(2 * width, next_width)
        self.local_down = Downsample(local_channels, local_channels)

    def forward(self, x, f_g):
        if x.shape[1] != self.width + self.local_channels or f_g.shape[1] != self.width:
            raise DimensionError(
                f"S&M expects {self.width + self.local_channels} + {self.width} channels, "
                f"got {x.shape[1]} + {f_g.shape[1]}"
            )
        if x.shape[-2:] != f_g.shape[-2:]:
            raise DimensionError("S&M global feature resolution mismatch")
        img, loc = split(x, self.local_channels)
        img = self.image_down(torch.cat([img, f_g], 1))
        return torch.cat([img, self.local_down(loc)], 1)


class CSDA(nn.Module):
    """Channel attention followed by spatial focusing on low ``M_local`` regions.

    ``X' = CA(X + body(X))`` and ``Y = X' * (1 - M_local) + X'``. The residual
    conv body is optional (``n_convs=0`` gives ``X' = CA(X)``).
    """

    def __init__(self, channels, reduction=8, n_convs=3):
        super().__init__()
        layers = []
        for k in range(n_convs):
            if k:
                layers.append(nn.ReLU())
            layers.append(conv(channels, channels))
        self.body = nn.Sequential(*layers) if layers else None
        self.ca = ChannelAttention(channels, reduction)

    def forward(self, x, m_local):
        if m_local.shape[1] != 1 or m_local.shape[-2:] != x.shape[-2:] or m_local.shape[0] != x.shape[0]:
            raise DimensionError(f"M_local shape {tuple(m_local.shape)} does not match {tuple(x.shape)}")
        if self.body is not None:
            x = x + self.body(x)
        x = self.ca(x)
        return x * (1 - m_local) + x


class DAFF(nn.Module):
    """Density aware fusion of shallow/deep LB features and the global feature.

    All inputs must already share the decoder stage's resolution; the shallow
    and deep features carry ``width + C_L`` channels, the global one ``width``.
    """

    def __init__(self, width, local_channels, out_channels, csda_convs=3):
        super().__init__()
        self.width = width
        self.local_channels = local_channels
        self.g_conv = conv(width, width)
        self.m_proj = conv(local_channels, 1)
        self.csda_shallow = CSDA(2 * width, n_convs=csda_convs)
        self.csda_deep = CSDA(2 * width, n_convs=csda_convs)
        self.compress = nn.Conv2d(4 * width + local_channels, out_channels, 1)

    def local_map(self, deep_local):
        return torch.sigmoid(F.leaky_relu(self.m_proj(deep_local), LEAK))

    def forward(self, shallow, deep, f_g):
        c = self.width + self.local_channels
        if shallow.shape[1] != c or deep.shape[1] != c or f_g.shape[1] != self.width:
            raise DimensionError("DAFF channel mismatch")
        if not (shallow.shape[-2:] == deep.shape[-2:] == f_g.shape[-2:]):
            raise DimensionError("DAFF inputs are not aligned to one resolution")
        img_s, _ = split(shallow, self.local_channels)
        img_d, loc_d = split(deep, self.local_channels)
        g = F.leaky_relu(self.g_conv(f_g), LEAK)
        m = self.local_map(loc_d)
        ys = self.csda_shallow(torch.cat([img_s, g], 1), m)
        yd = self.csda_deep(torch.cat([img_d, g], 1), m)
        return self.compress(torch.cat([ys, yd, loc_d], 1))


class ConcatFuse(nn.Module):
    """Ablation stand-in for DAFF: concatenate everything, 1x1 conv."""

    def __init__(self, width, local_channels, out_channels, csda_convs=None):
        super().__init__()
        self.proj = nn.Conv2d(3 * width + 2 * local_channels, out_channels, 1)

    def forward(self, shallow, deep, f_g):
        if not (shallow.shape[-2:] == deep.shape[-2:] == f_g.shape[-2:]):
            raise DimensionError("fusion inputs are not aligned to one resolution")
        return self.proj(torch.cat([shallow, deep, f_g], 1))


class DecoderFusion(nn.Module):
    """Aligns deep LB and global features to the shallow resolution, then fuses."""

    def __init__(self, width, deep_width, g_width, local_channels, out_channels, use_daff=True, csda_convs=3):
        super().__init__()
        self.local_channels = local_channels
        self.deep_image_up = Upsample(deep_width, width)
        self.deep_local_up = Upsample(local_channels, local_channels)
        self.g_up = Upsample(g_width, width)
        fuse = DAFF if use_daff else ConcatFuse
        self.fuse = fuse(width, local_channels, out_channels, csda_convs)

    def align(self, deep, f_g):
        img, loc = split(deep, self.local_channels)
        deep = torch.cat([self.deep_image_up(img), self.deep_local_up(loc)], 1)
        return deep, self.g_up(f_g)

    def forward(self, shallow, deep, f_g):
        deep, f_g = self.align(deep, f_g)
        return self.fuse(shallow, deep, f_g)


class IDRF(nn.Module):
    """Intermediate restore block whose residual is fed back into the local feature."""

    def __init__(self, width, local_channels):
        super().__init__()
        self.irb = RestoreBlock(width, 2)
        self.proj = conv(3, local_channels)
        self.merge = nn.Conv2d(2 * local_channels, local_channels, 1)

    def forward(self, f_img, img_down):
        if f_img.shape[-2:] != img_down.shape[-2:]:
            raise DimensionError(
                f"IDRF resolution mismatch: {tuple(f_img.shape[-2:])} vs {tuple(img_down.shape[-2:])}"
            )
        res_inter = self.irb(f_img)
        j_inter = torch.clamp(img_down + res_inter, 0.0, 1.0)
        return self.proj(res_inter), j_inter, res_inter

    def update(self, f_local, f_local_new):
        return self.merge(torch.cat([f_local, f_local_new], 1))


def stage_scale(s):
    """Downsampling factor of 0-based stage ``s`` relative to the input."""
    return 2 ** min(s, 6 - s)


def area_down(img, factor):
    return img if factor == 1 else F.avg_pool2d(img, factor)


@dataclass
class LbOutput:
    J_lb: torch.Tensor
    res: torch.Tensor
    inters: list = field(default_factory=list)
    # (0-based stage, J_inter) for each IDRF
    inter_stages: list = field(default_factory=list)
    stage_outputs: list = field(default_factory=list)
    local_maps: list = field(default_factory=list)


class LocalBranch(nn.Module):
    def __init__(self, cfg: Optional[LbConfig] = None, g_widths=None, use_daff=True, use_dr=True, use_idrf=True):
        super().__init__()
        self.cfg = cfg = cfg or LbConfig()
        g_widths = tuple(g_widths or cfg.widths)
        cl = cfg.local_channels
        w = cfg.widths
        self.use_idrf = use_idrf
        self.embed = LocalEmbed(w[0], cl, use_dr)
        self.stages = nn.ModuleList(res_stack(cfg.stage_channels(s), n) for s, n in enumerate(cfg.blocks))
        self.sm = nn.ModuleList(SplitMerge(w[s], w[s + 1], cl) for s in range(3))
        self.fusions = nn.ModuleList(
            DecoderFusion(
                w[2 - k], w[3 + k], g_widths[3 + k], cl, cfg.stage_channels(4 + k), use_daff, cfg.csda_convs
            )
            for k in range(3)
        )
        self.idrf = nn.ModuleDict(
            {str(s): IDRF(w[s - 1], cl) for s in cfg.idrf_stages} if use_idrf else {}
        )
        self.restore = RestoreBlock(cfg.stage_channels(6), cfg.restore_blocks)

    @property
    def n_intermediate(self):
        return len(self.idrf)

    def forward(self, img, proposal, f_g):
        h, wd = img.shape[-2:]
        if h % 8 or wd % 8:
            raise DimensionError(f"local branch input ({h}, {wd}) must be divisible by 8")
        if len(f_g) != 7:
            raise DimensionError(f"expected 7 global features, got {len(f_g)}")
        cl = self.cfg.local_channels
        f_img, f_loc = self.embed(img, proposal)
        x = torch.cat([f_img, f_loc], 1)
        out = LbOutput(None, None)
        for s in range(7):
            x = self.stages[s](x)
            key = str(s + 1)
            if key in self.idrf:
                img_part, loc = split(x, cl)
                idrf = self.idrf[key]
                f_new, j_inter, _ = idrf(img_part, area_down(img, stage_scale(s)))
                x = torch.cat([img_part, idrf.update(loc, f_new)], 1)
                out.inters.append(j_inter)
                out.inter_stages.append(s)
            out.stage_outputs.append(x)
            if s < 3:
                x = self.sm[s](x, f_g[s])
            elif s < 6:
                fusion = self.fusions[s - 3]
                shallow = out.stage_outputs[5 - s]
                deep, g = fusion.align(x, f_g[s])
                if isinstance(fusion.fuse, DAFF):
                    out.local_maps.append(fusion.fuse.local_map(split(deep, cl)[1]))
                x = fusion.fuse(shallow, deep, g)
        res = self.restore(x)
        out.res = res
        out.J_lb = torch.clamp(img + res, 0.0, 1.0)
        return out
