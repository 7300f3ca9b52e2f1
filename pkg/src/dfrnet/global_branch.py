"""Global branch: Siamese 7-stage U-Net with density feature refinement."""
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .layers import DimensionError, Downsample, RestoreBlock, Upsample, conv, res_stack


@dataclass
class GbConfig:
    widths: tuple = (32, 64, 128, 256, 128, 64, 32)
    blocks: tuple = (2, 2, 3, 4, 3, 2, 2)
    restore_blocks: int = 4

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.blocks = tuple(self.blocks)
        if len(self.widths) != 7 or len(self.blocks) != 7:
            raise ValueError("global branch has exactly 7 stages")
        if self.widths != self.widths[::-1]:
            raise ValueError("global branch widths must be symmetric")


@dataclass
class GlobalBlockState:
    F_I: torch.Tensor
    F_P: torch.Tensor
    F_tilde: torch.Tensor
    F_G: torch.Tensor
    W_c: torch.Tensor
    W_s: torch.Tensor


def gdfr(F_I, F_P, ws_uses_wc=False):
    """Refine the image feature using its squared difference to the proposal feature.

    ``W_c = sigmoid(GAP(D))`` weights channels, ``W_s = sigmoid(CAP(D))`` marks
    where the two inputs already differ, and ``F_G = (1 - W_s) * (F_I * W_c) + F_I``.
    With ``ws_uses_wc`` the spatial map is taken over ``W_c * D`` instead of ``D``.
    """
    if F_I.shape != F_P.shape:
        raise DimensionError(f"GDFR inputs differ in shape: {tuple(F_I.shape)} vs {tuple(F_P.shape)}")
    D = (F_P - F_I) ** 2
    W_c = torch.sigmoid(D.mean(dim=(2, 3), keepdim=True))
    F_tilde = F_I * W_c
    W_s = torch.sigmoid((W_c * D if ws_uses_wc else D).mean(dim=1, keepdim=True))
    F_G = (1 - W_s) * F_tilde + F_I
    return GlobalBlockState(F_I, F_P, F_tilde, F_G, W_c, W_s)


class Tower(nn.Module):
    """One feature-extraction tower: embedding, 7 ResBlock stages and resamplers."""

    def __init__(self, cfg):
        super().__init__()
        w = cfg.widths
        self.embed = conv(3, w[0])
        self.stages = nn.ModuleList(res_stack(c, n) for c, n in zip(w, cfg.blocks))
        self.down = nn.ModuleList(Downsample(w[i], w[i + 1]) for i in range(3))
        self.up = nn.ModuleList(Upsample(w[i], w[i + 1]) for i in range(3, 6))

    def transition(self, i, x, skips):
        """Move the stage-``i`` output (0-based) to stage ``i + 1``'s input."""
        if i < 3:
            return self.down[i](x)
        return self.up[i - 3](x) + skips[5 - i]


def siamese_stage(tower_i, tower_p, i, F_I, F_P):
    if F_I.shape != F_P.shape:
        raise DimensionError(f"Siamese inputs differ in shape: {tuple(F_I.shape)} vs {tuple(F_P.shape)}")
    return tower_i.stages[i](F_I), tower_p.stages[i](F_P)


@dataclass
class GbOutput:
    J_gb: torch.Tensor
    res: torch.Tensor
    states: list

    @property
    def F_G(self):
        return [s.F_G for s in self.states]

    @property
    def F_I(self):
        return [s.F_I for s in self.states]

    @property
    def F_P(self):
        return [s.F_P for s in self.states]


class GlobalBranch(nn.Module):
    def __init__(self, cfg: Optional[GbConfig] = None, siamese=True, use_gdfr=True, ws_uses_wc=False):
        super().__init__()
        self.cfg = cfg = cfg or GbConfig()
        self.siamese = siamese
        self.use_gdfr = use_gdfr
        self.ws_uses_wc = ws_uses_wc
        self.tower_i = Tower(cfg)
        self.tower_p = self.tower_i if siamese else Tower(cfg)
        self.restore = RestoreBlock(2 * cfg.widths[-1], cfg.restore_blocks)

    def forward(self, img, proposal):
        h, w = img.shape[-2:]
        if h % 8 or w % 8:
            raise DimensionError(f"global branch input ({h}, {w}) must be divisible by 8")
        f_i = self.tower_i.embed(img)
        f_p = self.tower_p.embed(proposal)
        skips_i, skips_p, states = [], [], []
        for i in range(7):
            f_i, f_p = siamese_stage(self.tower_i, self.tower_p, i, f_i, f_p)
            st = gdfr(f_i, f_p, self.ws_uses_wc)
            if not self.use_gdfr:
                st.F_G = st.F_I
            states.append(st)
            if i < 6:
                skips_i.append(f_i)
                skips_p.append(f_p)
                f_i = self.tower_i.transition(i, f_i, skips_i)
                f_p = self.tower_p.transition(i, f_p, skips_p)
        res = self.restore(torch.cat([states[-1].F_P, states[-1].F_G], dim=1))
        return GbOutput(torch.clamp(img + res, 0.0, 1.0), res, states)
