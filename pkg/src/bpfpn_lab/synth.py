"""Synthetic infrared-like frames with sparse point targets and masks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import GenerationError, ParameterError, ShapeError
from .tensor import Rng, as_tensor, load_container, save_container

MAX_MASK_DENSITY = 0.02
MANIFEST = "manifest.csv"
MANIFEST_HEADER = ["file_image", "file_mask", "seed", "n_targets"]
BORDER = 4
BLUR_RADIUS = 2
BLUR_PASSES = 3


def disc_pixels(radius: float) -> int:
    """Lattice points strictly inside a circle of the given radius."""
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return int(np.count_nonzero(yy**2 + xx**2 < radius**2))


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    n_targets: int = 1
    target_sigma: float = 1.0
    target_amplitude: float = 1.0
    clutter_scale: float = 0.2
    seed: int = 0

    def validate(self) -> "SceneConfig":
        if self.size not in (32, 64, 128):
            raise ParameterError(f"size must be 32, 64 or 128, got {self.size}")
        if not 0 <= self.n_targets <= 4:
            raise ParameterError(f"n_targets must be in 0..4, got {self.n_targets}")
        if not 0.5 <= self.target_sigma <= 1.5:
            raise ParameterError(f"target_sigma must be in [0.5, 1.5], got {self.target_sigma}")
        if not 0.3 <= self.target_amplitude <= 1.0:
            raise ParameterError(f"target_amplitude must be in [0.3, 1.0], got {self.target_amplitude}")
        if not 0.0 <= self.clutter_scale <= 0.5:
            raise ParameterError(f"clutter_scale must be in [0, 0.5], got {self.clutter_scale}")
        worst = self.n_targets * disc_pixels(2 * self.target_sigma)
        if worst > MAX_MASK_DENSITY * self.size**2:
            raise ParameterError(
                f"{self.n_targets} targets of sigma {self.target_sigma} can cover {worst} pixels, "
                f"more than {MAX_MASK_DENSITY:.0%} of a {self.size}x{self.size} frame"
            )
        return self


@dataclass
class Scene:
    image: np.ndarray  # (1, 1, H, W) in [0, 1]
    mask: np.ndarray  # (1, 1, H, W) in {0, 1}
    centers: list  # (y, x, sigma, amplitude)
    config: SceneConfig


def box_blur(plane: np.ndarray, radius: int) -> np.ndarray:
    """Mean over a (2r+1)^2 window with edge-replicated borders."""
    k = 2 * radius + 1
    padded = np.pad(plane, radius, mode="edge")
    csum = np.cumsum(np.cumsum(np.pad(padded, ((1, 0), (1, 0))), axis=0), axis=1)
    total = csum[k:, k:] - csum[:-k, k:] - csum[k:, :-k] + csum[:-k, :-k]
    return total / (k * k)


def _clutter(size: int, scale: float, rng: Rng) -> np.ndarray:
    noise = rng.uniform(size * size).reshape(size, size)
    for _ in range(BLUR_PASSES):
        noise = box_blur(noise, BLUR_RADIUS)
    lo, hi = noise.min(), noise.max()
    return scale * (noise - lo) / (hi - lo)


def _place(cfg: SceneConfig, rng: Rng) -> list:
    min_dist = 6 * cfg.target_sigma
    centers: list = []
    attempts = 0
    while len(centers) < cfg.n_targets:
        if attempts >= 1000:
            raise GenerationError(
                f"could not place {cfg.n_targets} separated targets in {attempts} attempts"
            )
        attempts += 1
        y, x = rng.integers(BORDER, cfg.size - BORDER, 2)
        if all(math.hypot(y - cy, x - cx) >= min_dist for cy, cx, *_ in centers):
            centers.append((int(y), int(x), cfg.target_sigma, cfg.target_amplitude))
    return centers


def generate(config: SceneConfig) -> Scene:
    cfg = config.validate()
    rng = Rng(cfg.seed)
    image = _clutter(cfg.size, cfg.clutter_scale, rng.spawn("clutter"))
    centers = _place(cfg, rng.spawn("targets"))
    yy, xx = np.mgrid[0 : cfg.size, 0 : cfg.size]
    mask = np.zeros((cfg.size, cfg.size))
    for y, x, sigma, amp in centers:
        r2 = (yy - y) ** 2 + (xx - x) ** 2
        image = image + amp * np.exp(-r2 / (2 * sigma**2))
        mask[r2 < (2 * sigma) ** 2] = 1.0
    image = np.clip(image, 0.0, 1.0)
    return Scene(image[None, None].copy(), mask[None, None].copy(), centers, cfg)


def downsample_mask(mask, stride: int = 8) -> np.ndarray:
    """Block-max pooling: a coarse cell is 1 iff any covered pixel is 1."""
    mask = as_tensor(mask)
    n, c, h, w = mask.shape
    if h % stride or w % stride:
        raise ShapeError(f"mask {h}x{w} is not divisible by stride {stride}")
    return mask.reshape(n, c, h // stride, stride, w // stride, stride).max(axis=(3, 5))


def make_dataset(configs, path) -> list[dict]:
    """Write one image/mask container pair per config plus ``manifest.csv``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, cfg in enumerate(configs):
        scene = generate(cfg)
        image_name, mask_name = f"scene_{i:05d}_image.gft", f"scene_{i:05d}_mask.gft"
        save_container(scene.image, root / image_name)
        save_container(scene.mask, root / mask_name)
        rows.append({"file_image": image_name, "file_mask": mask_name, "seed": cfg.seed, "n_targets": cfg.n_targets})
    with open(root / MANIFEST, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def load_dataset(path) -> list[tuple[np.ndarray, np.ndarray, dict]]:
    """Read back ``(image, mask, manifest row)`` triples; missing files raise ``OSError``."""
    root = Path(path)
    with open(root / MANIFEST, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        row = {**row, "seed": int(row["seed"]), "n_targets": int(row["n_targets"])}
        out.append((load_container(root / row["file_image"]), load_container(root / row["file_mask"]), row))
    return out


def scene_configs(count: int, base: SceneConfig, seed: int, max_targets: int = 3) -> list[SceneConfig]:
    """``count`` configs derived from ``base``, with per-scene seeds and target counts."""
    rng = Rng(seed).spawn("dataset")
    counts = rng.integers(1, max_targets + 1, count)
    seeds = rng.raw(count)
    return [replace(base, n_targets=int(k), seed=int(s)) for k, s in zip(counts, seeds)]
