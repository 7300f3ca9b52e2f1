"""DFR-Net assembly: proposal generator, both branches and adaptive fusion."""
from dataclasses import asdict, dataclass, field, fields, replace

import torch
import torch.nn as nn

from .global_branch import GbConfig, GlobalBranch
from .layers import DimensionError, count_params, init_weights
from .local_branch import LbConfig, LocalBranch
from .pig import PIG, PigConfig

FLAGS = ("siamese", "l_rd", "gdfr", "daff", "dr", "idrf", "l_ldr")

# Table rows in order: each variant switches on one more flag than the last.
VARIANTS = (
    ("1", "base", ()),
    ("2", "+Siamese", ("siamese",)),
    ("3", "+L_RD", ("siamese", "l_rd")),
    ("4", "+GDFR", ("siamese", "l_rd", "gdfr")),
    ("5", "+DAFF", ("siamese", "l_rd", "gdfr", "daff")),
    ("6", "+DR", ("siamese", "l_rd", "gdfr", "daff", "dr")),
    ("7", "+IDRF", ("siamese", "l_rd", "gdfr", "daff", "dr", "idrf")),
    ("8", "+L_LDR (default)", FLAGS),
)


@dataclass
class ModelConfig:
    gb: GbConfig = field(default_factory=GbConfig)
    lb: LbConfig = field(default_factory=LbConfig)
    pig: PigConfig = field(default_factory=PigConfig)
    siamese: bool = True
    l_rd: bool = True
    gdfr: bool = True
    daff: bool = True
    dr: bool = True
    idrf: bool = True
    l_ldr: bool = True
    ws_uses_wc: bool = False
    alpha: float = 0.5

    @classmethod
    def toy(cls, **kw):
        """C=8, C_L=2 and roughly halved block counts."""
        c = 8
        widths = (c, 2 * c, 4 * c, 8 * c, 4 * c, 2 * c, c)
        return cls(
            gb=GbConfig(widths=widths, blocks=(1, 1, 2, 2, 2, 1, 1), restore_blocks=2),
            lb=LbConfig(widths=widths, blocks=(2, 3, 4, 5, 3, 4, 4), local_channels=2, restore_blocks=2),
            pig=PigConfig(widths=(8, 16, 32, 16, 8), blocks=1),
            **kw,
        )

    def with_flags(self, enabled):
        """Copy with exactly the named ablation flags switched on."""
        unknown = set(enabled) - set(FLAGS)
        if unknown:
            raise ValueError(f"unknown flags: {sorted(unknown)}")
        return replace(self, **{f: f in enabled for f in FLAGS})

    def variant(self, label):
        for lab, _, flags in VARIANTS:
            if lab == label:
                return self.with_flags(flags)
        raise ValueError(f"unknown variant {label!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sub = {"gb": GbConfig, "lb": LbConfig, "pig": PigConfig}
        for k, typ in sub.items():
            if k in d and isinstance(d[k], dict):
                d[k] = typ(**d[k])
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class DFROutput:
    J: torch.Tensor
    J_gb: torch.Tensor
    J_lb: torch.Tensor
    P: torch.Tensor
    J_preclamp: torch.Tensor
    gb: object
    lb: object

    @property
    def inters(self):
        return self.lb.inters


class DFRNet(nn.Module):
    def __init__(self, cfg=None, seed=0):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.pig = PIG(cfg.pig)
        self.gb = GlobalBranch(cfg.gb, siamese=cfg.siamese, use_gdfr=cfg.gdfr, ws_uses_wc=cfg.ws_uses_wc)
        self.lb = LocalBranch(cfg.lb, g_widths=cfg.gb.widths, use_daff=cfg.daff, use_dr=cfg.dr, use_idrf=cfg.idrf)
        self.alpha = nn.Parameter(torch.tensor(float(cfg.alpha)))
        if seed is not None:
            gen = torch.Generator().manual_seed(seed)
            init_weights(self, gen)

    def forward(self, img):
        h, w = img.shape[-2:]
        if h % 8 or w % 8:
            raise DimensionError(f"input ({h}, {w}) must be divisible by 8")
        P = self.pig(img)
        gb = self.gb(img, P)
        lb = self.lb(img, P, gb.F_G)
        pre = self.alpha * gb.J_gb + (1 - self.alpha) * lb.J_lb
        return DFROutput(torch.clamp(pre, 0.0, 1.0), gb.J_gb, lb.J_lb, P, pre, gb, lb)


def count_parameters(cfg):
    """Exact scalar parameter count; built on the meta device so nothing is allocated."""
    with torch.device("meta"):
        model = DFRNet(cfg, seed=None)
    return count_params(model)
