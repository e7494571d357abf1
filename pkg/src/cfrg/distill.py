"""Teacher-student cosine distances, the push-pull distillation loss, and the coarse weight w_d."""
from __future__ import annotations

import logging

import torch
import torch.nn.functional as F
from torch import Tensor

from .features import FeaturePyramid, as_levels

log = logging.getLogger(__name__)

EPS = 1e-8


def cosine_distance_level(a: Tensor, b: Tensor) -> Tensor:
    """1 - cos along dim 1 for (B, C, H, W) inputs; returns (B, H, W) in [0, 2]."""
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    dot = (a * b).sum(1)
    norm = a.norm(dim=1).clamp_min(EPS) * b.norm(dim=1).clamp_min(EPS)
    return (1.0 - dot / norm).clamp(0.0, 2.0)


def cosine_distance(pyr_a: FeaturePyramid, pyr_b: FeaturePyramid) -> list[Tensor]:
    la, lb = as_levels(pyr_a), as_levels(pyr_b)
    if len(la) != len(lb):
        raise ValueError("pyramids have different depths")
    return [cosine_distance_level(a, b) for a, b in zip(la, lb)]


def downsample_mask(mask: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of a (B, 1, H, W) or (B, H, W) binary mask to (B, h, w)."""
    if mask.dim() == 3:
        mask = mask[:, None]
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask[:, 0]
    return F.interpolate(mask.float(), size=size, mode="nearest")[:, 0]


def distill_loss(
    distances: list[Tensor],
    mask: Tensor,
    push_enabled: bool = True,
    clamp_push: bool = True,
) -> Tensor:
    """Sum over levels of the per-level spatial mean of (1-G)*D + G*(1-D).

    With ``clamp_push`` the push term sees D clamped to [0, 1]. With push
    disabled only normal pixels contribute, averaged over their count.
    """
    total = distances[0].new_zeros(())
    for d in distances:
        g = downsample_mask(mask, d.shape[-2:]).to(d.dtype)
        pull = (1.0 - g) * d
        if push_enabled:
            d_push = d.clamp(0.0, 1.0) if clamp_push else d
            total = total + (pull + g * (1.0 - d_push)).mean()
        else:
            n_normal = (1.0 - g).sum()
            if n_normal.item() == 0:
                log.warning("distill_loss: no normal pixels at level %s; contributing zero", tuple(d.shape))
                total = total + 0.0 * d.sum()
            else:
                total = total + pull.sum() / n_normal
    return total


def distill_weight(distances: list[Tensor]) -> list[Tensor]:
    """w_d = 1 - clamp(D, 0, 1); low values mark anomalies."""
    return [1.0 - d.clamp(0.0, 1.0) for d in distances]
