"""Anomaly score maps: recovery distance, fusion with S_out, Gaussian smoothing, and dump I/O."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter
from torch import Tensor

from .distill import cosine_distance_level

# Heatmap PNGs map this score onto the full uint16 range; rec_map <= 2 and S_out <= 1.
HEATMAP_FULL_SCALE = 3.0


@dataclass
class AnomalyScoreMap:
    pixel_scores: np.ndarray
    image_score: float


def recovery_similarity_map(f_t, f_r, size) -> Tensor:
    """Mean over levels of the upsampled per-pixel 1 - cos(F_t, F_r); shape (B, H, W)."""
    maps = []
    for t, r in zip(f_t, f_r):
        d = cosine_distance_level(t, r)[:, None]
        maps.append(F.interpolate(d, size=tuple(size), mode="bilinear", align_corners=False)[:, 0])
    return torch.stack(maps).mean(0)


def gaussian_blur(image: np.ndarray, sigma: float = 4.0) -> np.ndarray:
    """Gaussian filter with radius ceil(4 sigma) and reflect padding."""
    if sigma == 0:
        return image.astype(np.float64)
    return gaussian_filter(image.astype(np.float64), sigma=sigma, mode="reflect", truncate=4.0)


def image_score(pixel_scores: np.ndarray, mode: str = "max", top_k: int = 100) -> float:
    if mode == "max":
        return float(pixel_scores.max())
    flat = np.sort(pixel_scores.ravel())
    return float(flat[-min(top_k, flat.size):].mean())


def fuse_and_smooth(
    rec_map: np.ndarray | None,
    s_out: np.ndarray | None,
    sigma: float = 4.0,
    score_mode: str = "max",
    top_k: int = 100,
) -> AnomalyScoreMap:
    """Add the recovery map and the segmentation probabilities, then smooth.

    Either input may be None when its branch is ablated.
    """
    parts = [np.asarray(m, dtype=np.float64) for m in (rec_map, s_out) if m is not None]
    if not parts:
        raise ValueError("fuse_and_smooth needs at least one map")
    if any(p.shape != parts[0].shape for p in parts):
        raise ValueError(f"map shapes differ: {[p.shape for p in parts]}")
    smoothed = gaussian_blur(sum(parts), sigma)
    return AnomalyScoreMap(smoothed, image_score(smoothed, score_mode, top_k))


# --------------------------------------------------------------------------- prediction dumps


def _safe_name(source_id: str) -> str:
    return source_id.replace("/", "__")


def write_prediction(out_dir: str | Path, source_id: str, smap: AnomalyScoreMap) -> None:
    """Write ``<id>.png`` (16-bit heatmap), ``<id>.f32`` (raw row-major) and ``<id>.json`` sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = _safe_name(source_id)
    scores = smap.pixel_scores.astype(np.float32)
    scaled = np.clip(scores / HEATMAP_FULL_SCALE, 0.0, 1.0) * 65535.0
    Image.fromarray(np.round(scaled).astype(np.uint16)).save(out_dir / f"{name}.png")
    scores.tofile(out_dir / f"{name}.f32")
    sidecar = {
        "source_id": source_id,
        "shape": list(scores.shape),
        "dtype": "float32",
        "order": "row-major",
        "image_score": smap.image_score,
        "heatmap_full_scale": HEATMAP_FULL_SCALE,
    }
    (out_dir / f"{name}.json").write_text(json.dumps(sidecar, indent=2))
    csv_path = out_dir / "image_scores.csv"
    new = not csv_path.exists()
    with csv_path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["source_id", "image_score"])
        w.writerow([source_id, repr(smap.image_score)])


def read_prediction(out_dir: str | Path, source_id: str) -> AnomalyScoreMap:
    out_dir = Path(out_dir)
    name = _safe_name(source_id)
    meta = json.loads((out_dir / f"{name}.json").read_text())
    data = np.fromfile(out_dir / f"{name}.f32", dtype=np.float32).reshape(meta["shape"])
    return AnomalyScoreMap(data, float(meta["image_score"]))


def read_image_scores(out_dir: str | Path) -> dict[str, float]:
    with (Path(out_dir) / "image_scores.csv").open() as fh:
        return {row["source_id"]: float(row["image_score"]) for row in csv.DictReader(fh)}
