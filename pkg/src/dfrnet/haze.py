"""Synthetic paired haze data from the atmospheric scattering model.

Images are float arrays shaped ``(3, H, W)`` in ``[0, 1]``; depth, scattering
coefficient and transmission fields are ``(1, H, W)``.
"""
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .layers import DimensionError

D_MAX = 10.0
T_MIN = 0.05
DEPTH_KINDS = ("ramp", "radial", "value_noise")


class DataError(RuntimeError):
    """Missing, empty or inconsistent dataset."""


@dataclass
class HazeScene:
    clear: np.ndarray
    depth: np.ndarray
    beta: np.ndarray
    airlight: np.ndarray

    def __post_init__(self):
        self.clear = np.asarray(self.clear, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.beta = np.broadcast_to(np.asarray(self.beta, dtype=np.float64), self.depth.shape).copy()
        self.airlight = np.asarray(self.airlight, dtype=np.float64).reshape(3)
        _check_image(self.clear)
        h, w = self.clear.shape[1:]
        if self.depth.shape != (1, h, w) or self.beta.shape != (1, h, w):
            raise DimensionError(f"depth/beta must be (1, {h}, {w})")
        if (self.depth < 0).any() or (self.beta < 0).any():
            raise ValueError("depth and beta must be non-negative")

    @property
    def transmission(self):
        return make_transmission(self.depth, self.beta)


@dataclass
class DatasetManifest:
    root: Path
    # (id, split, beta_mean, beta_min, beta_max, airlight)
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self):
        return [e[0] for e in self.entries]

    def paths(self, pair_id):
        return (
            self.root / "hazy" / f"{pair_id}.png",
            self.root / "clear" / f"{pair_id}.png",
            self.root / "meta" / f"{pair_id}.txt",
        )

    def split(self, tag):
        return DatasetManifest(self.root, [e for e in self.entries if e[1] == tag])


def _check_image(img):
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"image must be (3, H, W), got {img.shape}")
    if img.shape[1] < 8 or img.shape[2] < 8:
        raise DimensionError(f"image must be at least 8x8, got {img.shape[1:]}")


def make_depth(kind, H, W, seed=0):
    """Depth map in ``[0, D_MAX]``.

    ``ramp`` grows linearly down the rows (rows are constant), ``radial`` is the
    distance to a seeded centre and ``value_noise`` bilinearly interpolates a
    seeded coarse grid.
    """
    if H < 8 or W < 8:
        raise DimensionError(f"depth map must be at least 8x8, got ({H}, {W})")
    rng = np.random.default_rng(seed)
    if kind == "ramp":
        d = np.repeat(np.linspace(0.0, 1.0, H)[:, None], W, axis=1)
    elif kind == "radial":
        cy, cx = rng.uniform(0, H - 1), rng.uniform(0, W - 1)
        yy, xx = np.mgrid[0:H, 0:W]
        d = np.hypot(yy - cy, xx - cx)
        d = d / d.max()
    elif kind == "value_noise":
        coarse = rng.uniform(0.0, 1.0, size=(5, 5))
        d = _bilinear(coarse, H, W)
    else:
        raise ValueError(f"unknown depth kind {kind!r}")
    return (D_MAX * d)[None]


def _bilinear(grid, H, W):
    gh, gw = grid.shape
    ys = np.linspace(0, gh - 1, H)
    xs = np.linspace(0, gw - 1, W)
    y0 = np.minimum(np.floor(ys).astype(int), gh - 2)
    x0 = np.minimum(np.floor(xs).astype(int), gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)


def make_transmission(depth, beta):
    depth = np.asarray(depth, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if depth.shape != beta.shape:
        raise DimensionError(f"depth {depth.shape} and beta {beta.shape} differ")
    if (depth < 0).any() or (beta < 0).any():
        raise ValueError("depth and beta must be non-negative")
    return np.exp(-beta * depth)


def apply_asm(scene, clamp=True):
    """Hazy image ``I = J t + A (1 - t)``."""
    t = scene.transmission
    A = scene.airlight[:, None, None]
    hazy = scene.clear * t + A * (1 - t)
    return np.clip(hazy, 0.0, 1.0) if clamp else hazy


def invert_asm(hazy, t, airlight, t_min=T_MIN):
    """Recover ``J = (I - A (1 - t)) / max(t, t_min)``, clamped to ``[0, 1]``."""
    if t_min <= 0:
        raise ValueError(f"t_min must be positive, got {t_min}")
    A = np.asarray(airlight, dtype=np.float64).reshape(3, 1, 1)
    t = np.asarray(t, dtype=np.float64)
    J = (np.asarray(hazy, dtype=np.float64) - A * (1 - t)) / np.maximum(t, t_min)
    return np.clip(J, 0.0, 1.0)


def make_clear(H, W, seed):
    """Procedural clear image: a two-colour gradient with a few flat shapes,
    kept inside ``[0.05, 0.95]``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W] / max(H - 1, W - 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0.05, 0.95, size=3)[:, None]
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        r = rng.uniform(0.1, 0.3)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        else:
            mask = np.hypot(yy - cy, xx - cx) < r
        img[:, mask] = color
    return np.clip(img, 0.05, 0.95)


def random_scene(H, W, beta_range, seed):
    rng = np.random.default_rng(seed)
    kind = DEPTH_KINDS[int(rng.integers(len(DEPTH_KINDS)))]
    depth = make_depth(kind, H, W, int(rng.integers(2**31)))
    lo, hi = beta_range
    density = make_depth("value_noise", H, W, int(rng.integers(2**31))) / D_MAX
    beta = lo + (hi - lo) * density
    airlight = rng.uniform(0.75, 1.0, size=3)
    clear = make_clear(H, W, int(rng.integers(2**31)))
    return HazeScene(clear, depth, beta, airlight), kind


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def save_png(img, path):
    """Write a (3, H, W) or (1, H, W) float image as 8-bit PNG, atomically."""
    arr = to_uint8(np.asarray(img))
    arr = arr[0] if arr.shape[0] == 1 else np.transpose(arr, (1, 2, 0))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    PILImage.fromarray(arr).save(tmp, format="PNG")
    os.replace(tmp, path)


def load_png(path):
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError as e:
        raise DataError(f"missing image {path}") from e
    return np.transpose(arr, (2, 0, 1))


def _write_text(path, text):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _fmt(x):
    return f"{x:.6f}"


def generate_dataset(n_pairs, H, W, density_range, seed, out, val_fraction=0.0):
    """Write ``n_pairs`` hazy/clear pairs with metadata and a manifest under ``out``."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    lo, hi = density_range
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid density range {density_range}")
    root = Path(out)
    try:
        for sub in ("hazy", "clear", "meta"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset under {root}: {e}") from e
    n_val = int(round(n_pairs * val_fraction))
    manifest = DatasetManifest(root)
    lines = ["# id\tsplit\tbeta_mean\tbeta_min\tbeta_max\tairlight_rgb"]
    for idx in range(n_pairs):
        pair_id = f"{idx:05d}"
        sub_seed = int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])
        scene, kind = random_scene(H, W, (lo, hi), sub_seed)
        split = "val" if idx >= n_pairs - n_val else "train"
        hazy_path, clear_path, meta_path = manifest.paths(pair_id)
        save_png(apply_asm(scene), hazy_path)
        save_png(scene.clear, clear_path)
        b = scene.beta
        A = ",".join(_fmt(a) for a in scene.airlight)
        meta = {
            "id": pair_id,
            "seed": sub_seed,
            "depth_kind": kind,
            "d_max": _fmt(D_MAX),
            "beta_mean": _fmt(b.mean()),
            "beta_min": _fmt(b.min()),
            "beta_max": _fmt(b.max()),
            "airlight": A,
            "t_mean": _fmt(scene.transmission.mean()),
            "height": H,
            "width": W,
        }
        _write_text(meta_path, "".join(f"{k} = {v}\n" for k, v in meta.items()))
        entry = (pair_id, split, float(_fmt(b.mean())), float(_fmt(b.min())), float(_fmt(b.max())),
                 tuple(float(_fmt(a)) for a in scene.airlight))
        manifest.entries.append(entry)
        lines.append("\t".join([pair_id, split, meta["beta_mean"], meta["beta_min"], meta["beta_max"], A]))
    _write_text(root / "manifest.txt", "\n".join(lines) + "\n")
    return manifest


def read_manifest(root):
    root = Path(root)
    path = root / "manifest.txt"
    if not path.exists():
        raise DataError(f"no manifest at {path}")
    manifest = DatasetManifest(root)
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        pid, split, bm, blo, bhi, A = line.split("\t")
        manifest.entries.append((pid, split, float(bm), float(blo), float(bhi), tuple(float(a) for a in A.split(","))))
    return manifest


def read_meta(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line and not line.lstrip().startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_pairs(manifest):
    """Load every (hazy, clear) pair as float arrays; checks files and sizes."""
    if len(manifest) == 0:
        raise DataError("manifest is empty")
    pairs = []
    for pid in manifest.ids:
        hazy_path, clear_path, _ = manifest.paths(pid)
        hazy, clear = load_png(hazy_path), load_png(clear_path)
        if hazy.shape != clear.shape:
            raise DataError(f"pair {pid}: hazy {hazy.shape} vs clear {clear.shape}")
        pairs.append((hazy, clear))
    return pairs
