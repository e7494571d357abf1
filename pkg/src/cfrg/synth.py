"""Synthetic defect generation: thresholded Perlin masks filled with blended textures."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import SynthConfig
from .errors import ConfigError

TEXTURE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin_field(height: int, width: int, res: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """2D gradient noise with ``res = (rows, cols)`` lattice cells over the image.

    Consumes exactly one ``rng.uniform(0, 2*pi, (rows + 1, cols + 1))`` draw.
    """
    ry, rx = res
    angles = rng.uniform(0.0, 2.0 * math.pi, size=(ry + 1, rx + 1))
    gy, gx = np.sin(angles), np.cos(angles)

    ys = np.arange(height) * (ry / height)
    xs = np.arange(width) * (rx / width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    Y0, X0 = y0[:, None], x0[None, :]

    def corner(dy: int, dx: int) -> np.ndarray:
        return gy[Y0 + dy, X0 + dx] * (fy - dy) + gx[Y0 + dy, X0 + dx] * (fx - dx)

    u, v = _fade(fx), _fade(fy)
    top = corner(0, 0) * (1 - u) + corner(0, 1) * u
    bottom = corner(1, 0) * (1 - u) + corner(1, 1) * u
    return top * (1 - v) + bottom * v


def _draw_period(rng: np.random.Generator, lo: int, hi: int) -> int:
    exps = [e for e in range(0, 12) if lo <= 2**e <= hi]
    if not exps:
        raise ConfigError(f"perlin_scale_range {lo, hi} contains no power of two")
    return 2 ** int(rng.choice(exps))


def perlin_mask(
    height: int,
    width: int,
    config: SynthConfig,
    rng: np.random.Generator,
    *,
    period: tuple[int, int] | None = None,
    threshold: float | None = None,
    rotate: bool = True,
) -> np.ndarray:
    """Binary uint8 mask: min-max normalized Perlin field strictly above the threshold."""
    if height < 8 or width < 8:
        raise ValueError(f"perlin_mask needs at least 8x8, got {height}x{width}")
    if period is None:
        lo, hi = config.perlin_scale_range
        period = (_draw_period(rng, lo, hi), _draw_period(rng, lo, hi))
    field = perlin_field(height, width, period, rng)
    lo_deg, hi_deg = config.rotation_range
    if rotate and hi_deg > lo_deg:
        angle = rng.uniform(lo_deg, hi_deg)
        field = ndimage.rotate(field, angle, reshape=False, order=1, mode="reflect")
    span = field.max() - field.min()
    norm = (field - field.min()) / span if span > 0 else np.zeros_like(field)
    thr = config.threshold if threshold is None else threshold
    return (norm > thr).astype(np.uint8)


def blend_anomaly(x_n: np.ndarray, texture: np.ndarray, mask: np.ndarray, beta: float) -> np.ndarray:
    """Opacity-``beta`` texture paste inside ``mask``; pixels outside are returned untouched."""
    if x_n.shape != texture.shape:
        raise ValueError(f"image {x_n.shape} and texture {texture.shape} differ")
    if mask.shape != x_n.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {x_n.shape[:2]}")
    m = (mask > 0)[..., None]
    blended = np.clip(beta * texture + (1.0 - beta) * x_n, 0.0, 1.0)
    return np.where(m, blended, x_n).astype(x_n.dtype, copy=False)


def procedural_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Random colored texture in [0, 1]: gratings, checkers or noise blotches."""
    kind = rng.integers(3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    if kind == 0:
        freq = rng.uniform(4, 24)
        theta = rng.uniform(0, math.pi)
        base = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)))
    elif kind == 1:
        n = int(rng.integers(3, 16))
        base = ((np.floor(xx * n) + np.floor(yy * n)) % 2).astype(float)
    else:
        base = sum(perlin_field(size, size, (2**o, 2**o), rng) / 2 ** (o * 0.5) for o in range(1, 5))
        base = (base - base.min()) / (np.ptp(base) + 1e-12)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    return (c0 * base[..., None] + c1 * (1 - base[..., None])).astype(np.float32)


class TextureBank:
    """Texture source: images from a directory, or procedural textures when no directory is set."""

    def __init__(self, root: str | Path | None = None):
        self.paths: list[Path] = []
        self._cache: dict[tuple[int, int], np.ndarray] = {}
        if root is not None:
            root = Path(root)
            if root.is_dir():
                self.paths = sorted(p for p in root.rglob("*") if p.suffix.lower() in TEXTURE_SUFFIXES)
            if not self.paths:
                raise ConfigError(f"texture_root {root} contains no images")

    @classmethod
    def from_config(cls, config: SynthConfig) -> TextureBank:
        return cls(config.texture_root)

    def _load(self, idx: int, size: int) -> np.ndarray:
        key = (idx, size)
        if key not in self._cache:
            with Image.open(self.paths[idx]) as im:
                im = im.convert("RGB").resize((size, size), Image.BILINEAR)
                self._cache[key] = np.asarray(im, dtype=np.float32) / 255.0
        return self._cache[key]

    def sample(self, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
        size = max(height, width)
        if self.paths:
            tex = self._load(int(rng.integers(len(self.paths))), size)
        else:
            tex = procedural_texture(size, rng)
        tex = np.rot90(tex, int(rng.integers(4)))
        if rng.random() < 0.5:
            tex = tex[:, ::-1]
        return np.ascontiguousarray(tex[:height, :width])


@dataclass
class SynthResult:
    image_a: np.ndarray
    mask: np.ndarray
    was_corrupted: bool


def _foreground(image: np.ndarray, threshold: float) -> np.ndarray:
    return image.mean(axis=2) > threshold


def synthesize(
    x_n,
    config: SynthConfig,
    rng: np.random.Generator,
    textures: TextureBank | None = None,
) -> SynthResult:
    """Corrupt a normal image with probability ``config.synth_probability``.

    ``x_n`` may be an ``ImageSample`` or an H x W x 3 array in [0, 1].
    """
    image = getattr(x_n, "image", x_n)
    h, w = image.shape[:2]
    if textures is None:
        textures = TextureBank.from_config(config)
    if rng.random() >= config.synth_probability:
        return SynthResult(image, np.zeros((h, w), np.uint8), False)
    mask = perlin_mask(h, w, config, rng)
    if config.foreground_mask:
        mask &= _foreground(image, config.foreground_threshold).astype(np.uint8)
    beta = rng.uniform(*config.blend_beta_range)
    texture = textures.sample(h, w, rng).astype(image.dtype)
    if not mask.any():
        return SynthResult(image, mask, False)
    return SynthResult(blend_anomaly(image, texture, mask, beta), mask, True)
