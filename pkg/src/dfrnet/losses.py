"""Training objective: reconstruction, perceptual, representation
dissimilarity and local density refinement terms."""
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import DimensionError


@dataclass
class LossWeights:
    perceptual: float = 0.2
    rd: float = 0.001
    ldr: float = 0.1

    def __post_init__(self):
        if min(self.perceptual, self.rd, self.ldr) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    total: torch.Tensor
    rec: float
    perceptual: float
    rd: float
    ldr: float

    def row(self):
        return {
            "total": _scalar(self.total),
            "rec": self.rec,
            "perceptual": self.perceptual,
            "rd": self.rd,
            "ldr": self.ldr,
        }


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def l_rec(pred, target):
    _same_shape(pred, target, "l_rec")
    return (pred - target).abs().mean()


class RandomConvPyramid(nn.Module):
    """Frozen 3-level conv feature extractor with seeded random weights.

    Stand-in for a pretrained VGG; :meth:`from_state` swaps in external weights.
    """

    def __init__(self, seed=1234, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for i, c in enumerate(widths):
            layer = nn.Conv2d(c_in, c, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen) / (c_in * 9) ** 0.5)
                layer.bias.zero_()
            layers.append(layer)
            c_in = c
        self.levels = nn.ModuleList(layers)
        self.requires_grad_(False)

    @classmethod
    def from_state(cls, state, widths=(16, 32, 64)):
        m = cls(widths=widths)
        m.load_state_dict({k: torch.as_tensor(v) for k, v in state.items()})
        m.requires_grad_(False)
        return m

    def forward(self, x):
        feats = []
        for layer in self.levels:
            x = F.relu(layer(x))
            feats.append(x)
        return feats


def l_perceptual(pred, target, extractor):
    _same_shape(pred, target, "l_perceptual")
    total = pred.new_zeros(())
    for fp, ft in zip(extractor(pred), extractor(target)):
        total = total + F.mse_loss(fp, ft)
    return total


def _cosine(a, b):
    a = a.flatten(1)
    b = b.flatten(1)
    na = a.norm(dim=1)
    nb = b.norm(dim=1)
    denom = na * nb
    dot = (a * b).sum(1)
    # cosine with a zero vector is defined as 0
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, dot / safe, torch.zeros_like(dot))


def l_rd(feats_p, feats_i):
    """Sum over stages of per-sample cosine similarity, averaged over the batch."""
    if len(feats_p) != len(feats_i):
        raise DimensionError("l_rd: stage counts differ")
    total = 0.0
    for fp, fi in zip(feats_p, feats_i):
        _same_shape(fp, fi, "l_rd")
        total = total + _cosine(fp, fi).mean()
    return total


def area_down_to(img, size):
    h, w = img.shape[-2:]
    th, tw = size
    if (h, w) == (th, tw):
        return img
    if h % th or w % tw or h // th != w // tw:
        raise DimensionError(f"cannot area-downsample {h}x{w} to {th}x{tw}")
    return F.avg_pool2d(img, h // th)


def l_ldr(inters, target):
    """Mean over intermediates of L1 against the area-downsampled target."""
    if not inters:
        return target.new_zeros(())
    total = 0.0
    for j in inters:
        if j.shape[:2] != target.shape[:2]:
            raise DimensionError(f"l_ldr: {tuple(j.shape)} vs {tuple(target.shape)}")
        total = total + (j - area_down_to(target, j.shape[-2:])).abs().mean()
    return total / len(inters)


def total_loss(out, target, weights=None, cfg=None, extractor=None, use_preclamp=False):
    """Weighted objective on the fused prediction; ``cfg`` flags drop L_RD/L_LDR."""
    weights = weights or LossWeights()
    use_rd = cfg is None or cfg.l_rd
    use_ldr = cfg is None or cfg.l_ldr
    pred = out.J_preclamp if use_preclamp else out.J
    rec = l_rec(pred, target)
    perc = l_perceptual(pred, target, extractor) if extractor is not None else pred.new_zeros(())
    rd = l_rd(out.gb.F_P, out.gb.F_I) if use_rd else pred.new_zeros(())
    ldr = l_ldr(out.inters, target) if use_ldr else pred.new_zeros(())
    total = combine(rec, perc, rd, ldr, weights)
    return LossReport(total, _scalar(rec), _scalar(perc), _scalar(rd), _scalar(ldr))


def _scalar(x):
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def combine(rec, perceptual, rd, ldr, weights):
    return rec + weights.perceptual * perceptual + weights.rd * rd + weights.ldr * ldr
