"""PSNR and SSIM on ``(3, H, W)`` images with unit dynamic range."""
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .layers import DimensionError

PSNR_CAP = 100.0
K1, K2 = 0.01, 0.03
WIN, SIGMA = 11, 1.5


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"metric inputs differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, data_range=1.0):
    x, y = _pair(x, y)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(10 * np.log10(data_range**2 / mse))


def gaussian_window(size=WIN, sigma=SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation, then keep only positions where the window fits
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    p = (len(g) - 1) // 2
    return out[p : img.shape[0] - p, p : img.shape[1] - p]


def ssim(x, y, data_range=1.0):
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), channel mean."""
    x, y = _pair(x, y)
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.shape[-1] < WIN or x.shape[-2] < WIN:
        raise DimensionError(f"SSIM needs at least {WIN}x{WIN}, got {x.shape[-2:]}")
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    g = gaussian_window()
    vals = []
    for a, b in zip(x, y):
        mu_a = _filter_valid(a, g)
        mu_b = _filter_valid(b, g)
        saa = _filter_valid(a * a, g) - mu_a**2
        sbb = _filter_valid(b * b, g) - mu_b**2
        sab = _filter_valid(a * b, g) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class EvalResult:
    ids: list = field(default_factory=list)
    psnr_values: list = field(default_factory=list)
    ssim_values: list = field(default_factory=list)

    def add(self, pair_id, p, s):
        self.ids.append(pair_id)
        self.psnr_values.append(p)
        self.ssim_values.append(s)

    @property
    def psnr_db(self):
        return float(np.mean(self.psnr_values))

    @property
    def ssim(self):
        return float(np.mean(self.ssim_values))

    def to_csv(self):
        rows = ["id,psnr_db,ssim"]
        rows += [f"{i},{p:.6f},{s:.6f}" for i, p, s in zip(self.ids, self.psnr_values, self.ssim_values)]
        rows.append(f"mean,{self.psnr_db:.6f},{self.ssim:.6f}")
        return "\n".join(rows) + "\n"
