"""Feature-space recovery: fuse the teacher pyramid into a bottleneck and decode normal-like features."""
from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor, nn

from .distill import cosine_distance_level
from .errors import PairingError
from .features import FeaturePyramid, as_levels


def _cbr(cin, cout, k=3, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride, k // 2, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)
    )


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int | None = None, stride: int = 1):
        super().__init__()
        cout = cout or cin
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class Bottleneck(nn.Module):
    """Fuse the three teacher levels and descend one more stride to the final-layer scale."""

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        c1, c2, c3 = channels
        self.down1 = nn.Sequential(_cbr(c1, c2, stride=2), _cbr(c2, c3, stride=2))
        self.down2 = _cbr(c2, c3, stride=2)
        self.fuse = _cbr(3 * c3, c3, k=1)
        self.embed = ResBlock(c3, 2 * c3, stride=2)
        self.out_channels = 2 * c3

    def forward(self, levels: list[Tensor]) -> Tensor:
        f1, f2, f3 = levels
        x = torch.cat([self.down1(f1), self.down2(f2), f3], dim=1)
        return self.embed(self.fuse(x))


class DecoderStage(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.res = ResBlock(cin)
        self.up = nn.Sequential(
            nn.ConvTranspose2d(cin, cout, 2, 2, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)
        )

    def forward(self, x):
        return self.up(self.res(x))


class RecoveryNet(nn.Module):
    def __init__(self, channels: Sequence[int]):
        super().__init__()
        c1, c2, c3 = channels
        self.bn = Bottleneck(channels)
        self.stage3 = DecoderStage(self.bn.out_channels, c3)
        self.stage2 = DecoderStage(c3, c2)
        self.stage1 = DecoderStage(c2, c1)

    def forward(self, pyr_ta: FeaturePyramid) -> FeaturePyramid:
        levels = as_levels(pyr_ta)
        z = self.bn(levels)
        r3 = self.stage3(z)
        r2 = self.stage2(r3)
        r1 = self.stage1(r2)
        out = [r1, r2, r3]
        for r, t in zip(out, levels):
            assert r.shape == t.shape, (tuple(r.shape), tuple(t.shape))
        ids = pyr_ta.sample_ids if isinstance(pyr_ta, FeaturePyramid) else None
        return FeaturePyramid(out, "recovery", ids)


def recovery_loss(f_r: FeaturePyramid, f_tn: FeaturePyramid) -> Tensor:
    """Sum over levels of mean(1 - cos(F_r, F_tn))."""
    ids_r = getattr(f_r, "sample_ids", None)
    ids_n = getattr(f_tn, "sample_ids", None)
    if ids_r is not None and ids_n is not None and tuple(ids_r) != tuple(ids_n):
        raise PairingError(f"recovery output {ids_r} paired with clean features of {ids_n}")
    return sum(cosine_distance_level(r, t).mean() for r, t in zip(as_levels(f_r), as_levels(f_tn)))


def recovery_weight(pyr_in: FeaturePyramid, f_r: FeaturePyramid) -> list[Tensor]:
    """w_r = 1 - clamp(1 - cos, 0, 1) per level; 1 - w_r is the recovery hint."""
    return [
        1.0 - cosine_distance_level(a, r).clamp(0.0, 1.0) for a, r in zip(as_levels(pyr_in), as_levels(f_r))
    ]
