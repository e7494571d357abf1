"""Synthetic mini-dataset in MVTec layout, used by the tests and desk-scale experiments.

Normal parts are a striped metallic plate with small pose jitter and sensor
noise. Test defects are high-contrast scratches and spots, drawn with a
different generator than the Perlin/texture synthesizer used in training.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

from .synth import procedural_texture


def normal_image(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    phase = rng.uniform(0, 2 * math.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * math.pi * 8 * (xx + 0.15 * yy) + phase)
    shade = 0.45 + 0.1 * yy + rng.uniform(-0.03, 0.03)
    gray = shade + 0.12 * stripes + rng.normal(0, 0.015, (size, size))
    tint = np.array([1.0, 0.97, 0.9]) * rng.uniform(0.97, 1.03, 3)
    return np.clip(gray[..., None] * tint, 0, 1)


def _scratch_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = rng.uniform(0.25, 0.75, 2) * size
    theta = rng.uniform(0, math.pi)
    length = rng.uniform(0.25, 0.45) * size
    width = rng.uniform(0.025, 0.045) * size
    dx, dy = xx - cx, yy - cy
    along = dx * math.cos(theta) + dy * math.sin(theta)
    across = -dx * math.sin(theta) + dy * math.cos(theta)
    return (np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)


def _spot_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), bool)
    for _ in range(int(rng.integers(1, 3))):
        cx, cy = rng.uniform(0.2, 0.8, 2) * size
        rx, ry = rng.uniform(0.05, 0.1, 2) * size
        mask |= ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    return mask


def anomalous_image(size: int, rng: np.random.Generator, kind: str) -> tuple[np.ndarray, np.ndarray]:
    image = normal_image(size, rng)
    if kind == "scratch":
        mask = _scratch_mask(size, rng)
        color = np.array([0.05, 0.05, 0.07]) if rng.random() < 0.5 else np.array([0.95, 0.95, 0.92])
    else:
        mask = _spot_mask(size, rng)
        color = rng.choice([np.array([0.75, 0.25, 0.1]), np.array([0.1, 0.2, 0.6])])
    image = np.where(mask[..., None], color + rng.normal(0, 0.02, image.shape), image)
    return np.clip(image, 0, 1), mask.astype(np.uint8)


def _save(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def make_mini_dataset(
    root: str | Path,
    category: str = "plate",
    n_train: int = 60,
    n_test_good: int = 20,
    n_test_bad: int = 20,
    size: int = 128,
    seed: int = 0,
) -> Path:
    rng = np.random.default_rng(seed)
    base = Path(root) / category
    for i in range(n_train):
        _save(normal_image(size, rng), base / "train" / "good" / f"{i:03d}.png")
    for i in range(n_test_good):
        _save(normal_image(size, rng), base / "test" / "good" / f"{i:03d}.png")
    kinds = ("scratch", "spot")
    for i in range(n_test_bad):
        kind = kinds[i % 2]
        img, mask = anomalous_image(size, rng, kind)
        name = f"{i // 2:03d}"
        _save(img, base / "test" / kind / f"{name}.png")
        _save(mask.astype(np.float64), base / "ground_truth" / kind / f"{name}_mask.png")
    return Path(root)


def make_textures(root: str | Path, n: int = 8, size: int = 96, seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    root = Path(root)
    for i in range(n):
        _save(procedural_texture(size, rng), root / f"texture_{i:02d}.png")
    return root
