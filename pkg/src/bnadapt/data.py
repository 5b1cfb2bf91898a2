"""Synthetic cross-domain segmentation benchmark.

Each sample is a 64x64 single-channel image of three nested, rotated
ellipses on a textured background. Labels::

    0 background
    1 whole-region rim   (inside the outer ellipse only)
    2 core               (innermost ellipse)
    3 enhanced ring      (middle ellipse minus core)

so the region sets nest as core <= enhanced <= whole, where enhanced means
labels {2, 3} and whole means labels {1, 2, 3}.

Scene geometry and appearance draw from separate random streams, so two
domains generated with the same seed share label maps whenever the shift
leaves foreground size untouched.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rng import stream
from .tensorio import load_tensor, save_tensor

CLASS_NAMES = ("background", "whole", "core", "enhanced")
SPLITS = ("source-train", "source-val", "target-train", "target-test")
DEFAULT_COUNTS = {"source-train": 400, "source-val": 100, "target-train": 400, "target-test": 100}


@dataclass(frozen=True)
class SceneParams:
    size: int = 64
    num_classes: int = 4
    axis_range: tuple[float, float] = (11.0, 20.0)
    enhanced_ratio: tuple[float, float] = (0.62, 0.78)
    core_ratio: tuple[float, float] = (0.30, 0.45)
    # mean intensity of background, whole rim, core, enhanced ring
    intensities: tuple[float, float, float, float] = (0.15, 0.45, 0.62, 0.88)
    intensity_jitter: float = 0.04
    texture_noise: float = 0.03
    empty_prob: float = 0.0


@dataclass(frozen=True)
class DomainShift:
    gain: float = 1.0
    gamma: float = 1.0
    noise: float = 0.0
    invert: bool = False
    size_ratio: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma exponent must be positive")
        if self.noise < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.size_ratio <= 0:
            raise ValueError("size ratio must be positive")

    @property
    def is_identity(self) -> bool:
        return self == DomainShift()


IDENTITY = DomainShift()
PRESETS: dict[str, DomainShift] = {
    "shift-appearance": DomainShift(gain=0.6, gamma=1.8, noise=0.05),
    "shift-subtype": DomainShift(gain=0.9, gamma=1.2, noise=0.03, size_ratio=0.7),
}


def render_label(size: int, center, axes, theta: float, enh: float, core: float, core_offset=(0.0, 0.0)) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c, s = math.cos(theta), math.sin(theta)

    def inside(cy, cx, a, b):
        dy, dx = yy - cy, xx - cx
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0

    cy, cx = center
    a, b = axes
    whole = inside(cy, cx, a, b)
    enhanced = inside(cy, cx, a * enh, b * enh) & whole
    core_m = inside(cy + core_offset[0], cx + core_offset[1], a * core, b * core) & enhanced
    label = np.zeros((size, size), np.uint8)
    label[whole] = 1
    label[enhanced] = 3
    label[core_m] = 2
    return label


def _geometry(rng: np.random.Generator, p: SceneParams) -> dict:
    lo, hi = p.axis_range
    a, b = rng.uniform(lo, hi, size=2)
    margin = hi + 1.0
    center = rng.uniform(margin, p.size - 1 - margin, size=2)
    theta = rng.uniform(0.0, math.pi)
    enh = rng.uniform(*p.enhanced_ratio)
    core = rng.uniform(*p.core_ratio)
    # core may drift inside the enhanced region
    off = rng.uniform(-1.0, 1.0, size=2) * (enh - core) * min(a, b) * 0.5
    empty = rng.random() < p.empty_prob
    return dict(center=center, axes=(a, b), theta=theta, enh=enh, core=core, core_offset=off, empty=empty)


def apply_shift(img: np.ndarray, shift: DomainShift, rng: np.random.Generator) -> np.ndarray:
    out = np.clip(img, 0.0, 1.0) ** shift.gamma * shift.gain
    if shift.invert:
        out = 1.0 - out
    if shift.noise > 0:
        out = out + rng.normal(0.0, shift.noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def make_sample(geo_rng, app_rng, shift: DomainShift, p: SceneParams) -> tuple[np.ndarray, np.ndarray]:
    g = _geometry(geo_rng, p)
    if g["empty"]:
        label = np.zeros((p.size, p.size), np.uint8)
    else:
        r = shift.size_ratio
        label = render_label(p.size, g["center"], (g["axes"][0] * r, g["axes"][1] * r), g["theta"], g["enh"], g["core"], tuple(np.asarray(g["core_offset"]) * r))
    levels = np.asarray(p.intensities) + app_rng.uniform(-p.intensity_jitter, p.intensity_jitter, size=len(p.intensities))
    img = levels[label]
    # low-frequency shading plus pixel texture
    yy, xx = np.mgrid[0 : p.size, 0 : p.size] / p.size
    gy, gx = app_rng.uniform(-0.05, 0.05, size=2)
    img = img + gy * (yy - 0.5) + gx * (xx - 0.5)
    img = img + app_rng.normal(0.0, p.texture_noise, size=img.shape)
    img = apply_shift(img, shift, app_rng)
    return img.astype(np.float32)[..., None], label


def make_split(split: str, n: int, shift: DomainShift, seed: int, params: SceneParams | None = None):
    """In-memory split: images (n, H, W, 1) float32 and labels (n, H, W) uint8."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    if n < 1:
        raise ValueError("n must be at least 1")
    p = params or SceneParams()
    geo = stream(seed, f"data/{split}/geometry")
    app = stream(seed, f"data/{split}/appearance")
    images = np.empty((n, p.size, p.size, 1), np.float32)
    labels = np.empty((n, p.size, p.size), np.uint8)
    for i in range(n):
        images[i], labels[i] = make_sample(geo, app, shift, p)
    return images, labels


def generate(split: str, n: int, shift: DomainShift, seed: int, out_dir, params: SceneParams | None = None) -> Path:
    """Write a split as BNT1 files plus ``manifest.txt``; returns the split directory."""
    images, labels = make_split(split, n, shift, seed, params)
    root = Path(out_dir) / split
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {root}: {e}") from e
    lines = []
    for i in range(n):
        ip, lp = f"images/{i:05d}.bnt", f"labels/{i:05d}.bnt"
        save_tensor(root / ip, images[i])
        save_tensor(root / lp, labels[i])
        lines.append(f"{ip},{lp}\n")
    with open(root / "manifest.txt", "w", newline="\n") as f:
        f.writelines(lines)
    return root


def generate_all(out_dir, preset: str, seed: int, counts: dict[str, int] | None = None, params: SceneParams | None = None) -> None:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    counts = {**DEFAULT_COUNTS, **(counts or {})}
    for split in SPLITS:
        shift = PRESETS[preset] if split.startswith("target") else IDENTITY
        generate(split, counts[split], shift, seed, out_dir, params)


def load_split(data_dir, split: str) -> tuple[np.ndarray, np.ndarray]:
    root = Path(data_dir) / split
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    images, labels = [], []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        ip, lp = line.split(",")
        images.append(load_tensor(root / ip))
        labels.append(load_tensor(root / lp))
    if not images:
        raise ValueError(f"split {split!r} in {os.fspath(data_dir)!r} is empty")
    return np.stack(images), np.stack(labels)


def foreground_fraction(labels: np.ndarray) -> float:
    return float((labels > 0).mean())


def with_shift(shift: DomainShift, **kw) -> DomainShift:
    return replace(shift, **kw)
