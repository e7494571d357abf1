"""Hint-guided segmentation branch and the training objective."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import LossConfig
from .errors import NumericError
from .features import FeaturePyramid, as_levels

PROB_EPS = 1e-7


@dataclass
class GuidedFeatures:
    in_t: list[Tensor]
    in_s: list[Tensor]


def guide(f_ta: FeaturePyramid, w_d: list[Tensor], w_r: list[Tensor] | None, hint_enabled: bool = True) -> GuidedFeatures:
    """in_t = (1 - w_d) * F_ta; in_s = (1 - w_r) * in_t, weights broadcast over channels.

    With the hint disabled (or no recovery weights) in_s is in_t.
    """
    levels = as_levels(f_ta)
    if len(w_d) != len(levels):
        raise ValueError("w_d depth does not match the pyramid")
    in_t = []
    for f, w in zip(levels, w_d):
        if w.shape != (f.shape[0], *f.shape[2:]):
            raise ValueError(f"weight {tuple(w.shape)} does not match features {tuple(f.shape)}")
        in_t.append((1.0 - w).unsqueeze(1) * f)
    if not hint_enabled or w_r is None:
        return GuidedFeatures(in_t, in_t)
    in_s = []
    for f, w in zip(in_t, w_r):
        if w.shape != (f.shape[0], *f.shape[2:]):
            raise ValueError(f"weight {tuple(w.shape)} does not match features {tuple(f.shape)}")
        in_s.append((1.0 - w).unsqueeze(1) * f)
    return GuidedFeatures(in_t, in_s)


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)
    )


class SegHead(nn.Module):
    """U-shaped decoder over the 3-level pyramid, emitting one logit map at 4x level-1 size."""

    def __init__(self, channels: Sequence[int], width: int = 128):
        super().__init__()
        c1, c2, c3 = channels
        self.b3 = _block(c3, width)
        self.b2 = _block(width + c2, width)
        self.b1 = _block(width + c1, width)
        self.refine = _block(width, width)
        self.head = nn.Conv2d(width, 1, 1)

    def forward(self, in_s: list[Tensor] | GuidedFeatures) -> Tensor:
        f1, f2, f3 = in_s.in_s if isinstance(in_s, GuidedFeatures) else in_s
        x = self.b3(f3)
        x = F.interpolate(x, size=f2.shape[-2:], mode="bilinear", align_corners=False)
        x = self.b2(torch.cat([x, f2], 1))
        x = F.interpolate(x, size=f1.shape[-2:], mode="bilinear", align_corners=False)
        x = self.b1(torch.cat([x, f1], 1))
        x = F.interpolate(x, scale_factor=4, mode="bilinear", align_corners=False)
        return self.head(self.refine(x))


def bce_loss(probs: Tensor, mask: Tensor) -> Tensor:
    """Mean binary cross-entropy over pixels with probabilities clamped to [eps, 1 - eps]."""
    if probs.shape != mask.shape:
        raise ValueError(f"prediction {tuple(probs.shape)} and mask {tuple(mask.shape)} differ")
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    g = mask.to(p.dtype)
    return -(g * torch.log(p) + (1.0 - g) * torch.log(1.0 - p)).mean()


def total_loss(l_dis: Tensor, l_rec: Tensor, l_bce: Tensor, weights: LossConfig = LossConfig()) -> Tensor:
    parts = {"L_dis": l_dis, "L_rec": l_rec, "L_bce": l_bce}
    vals = {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in parts.items()}
    bad = {k: v for k, v in vals.items() if not math.isfinite(v)}
    if bad:
        raise NumericError(f"non-finite loss component(s): {bad}")
    return weights.lambda_dis * l_dis + weights.lambda_rec * l_rec + weights.lambda_bce * l_bce
