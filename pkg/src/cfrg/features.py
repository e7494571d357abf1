"""Frozen teacher and learnable heterogeneous student, each emitting a 3-level pyramid.

Levels sit at strides 4, 8 and 16. The student projects its own channel widths
onto the teacher's with one 1x1 convolution per level.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import Tensor, nn

from .config import Config
from .dataset import IMAGENET_MEAN, IMAGENET_STD
from .errors import ConfigError, WeightsUnavailableError

# torchvision ImageNet-1k checkpoints, resolved from a local cache only.
WEIGHT_FILES = {
    "wide_resnet50_2": "wide_resnet50_2-95faca4d.pth",
    "efficientnet_b0": "efficientnet_b0_rwightman-7f5810bc.pth",
}
TEACHER_CHANNELS = {"wide_resnet50_2": (256, 512, 1024)}
STUDENT_CHANNELS = {"efficientnet_b0": (24, 40, 112), "wide_resnet50_2": (256, 512, 1024)}
LEVEL_STRIDES = (4, 8, 16)
PYRAMID_SOURCES = ("teacher_on_xa", "teacher_on_xn", "student_on_xa", "recovery")


@dataclass
class FeaturePyramid:
    levels: list[Tensor]
    source: str = "teacher_on_xa"
    sample_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        if len(self.levels) != 3:
            raise ValueError(f"pyramid must have 3 levels, got {len(self.levels)}")
        if self.source not in PYRAMID_SOURCES:
            raise ValueError(f"unknown pyramid source {self.source!r}")

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)

    def __len__(self) -> int:
        return 3

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(t.shape[1:]) for t in self.levels]


def as_levels(pyr: FeaturePyramid | Sequence[Tensor]) -> list[Tensor]:
    return list(pyr.levels) if isinstance(pyr, FeaturePyramid) else list(pyr)


def weights_dir(cfg: Config) -> Path:
    if cfg.backbone.weights_dir:
        return Path(cfg.backbone.weights_dir)
    return Path(os.environ.get("CFRG_WEIGHTS_DIR", Path(torch.hub.get_dir()) / "checkpoints"))


def _load_weights(arch: str, directory: Path) -> dict:
    path = directory / WEIGHT_FILES[arch]
    if not path.is_file():
        raise WeightsUnavailableError(f"pretrained weights for {arch} not found: expected {path}")
    return torch.load(path, map_location="cpu", weights_only=True)


class ImageNormalizer(nn.Module):
    def __init__(self):
        super().__init__()
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def forward(self, x: Tensor) -> Tensor:
        return (x - self.mean) / self.std


# --------------------------------------------------------------------------- desk-scale stand-ins


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU(inplace=True))


class TinyResNetTrunk(nn.Module):
    """Plain conv stack standing in for WideResNet50's first three stages."""

    def __init__(self, channels=(32, 64, 128)):
        super().__init__()
        c1, c2, c3 = channels
        self.stage1 = nn.Sequential(_conv(3, c1 // 2, 2), _conv(c1 // 2, c1, 2), _conv(c1, c1))
        self.stage2 = nn.Sequential(_conv(c1, c2, 2), _conv(c2, c2))
        self.stage3 = nn.Sequential(_conv(c2, c3, 2), _conv(c3, c3))
        self.channels = tuple(channels)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x: Tensor) -> list[Tensor]:
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        return [f1, f2, f3]


class InvertedResidual(nn.Module):
    def __init__(self, cin, cout, stride, expand=4):
        super().__init__()
        mid = cin * expand
        self.use_res = stride == 1 and cin == cout
        self.block = nn.Sequential(
            nn.Conv2d(cin, mid, 1, bias=False),
            nn.BatchNorm2d(mid),
            nn.SiLU(inplace=True),
            nn.Conv2d(mid, mid, 3, stride, 1, groups=mid, bias=False),
            nn.BatchNorm2d(mid),
            nn.SiLU(inplace=True),
            nn.Conv2d(mid, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        )

    def forward(self, x):
        out = self.block(x)
        return x + out if self.use_res else out


class TinyEfficientTrunk(nn.Module):
    """Depthwise-separable MBConv stack standing in for EfficientNet-b0."""

    def __init__(self, channels=(16, 24, 48)):
        super().__init__()
        c1, c2, c3 = channels
        self.stem = nn.Sequential(nn.Conv2d(3, 8, 3, 2, 1, bias=False), nn.BatchNorm2d(8), nn.SiLU(inplace=True))
        self.stage1 = nn.Sequential(InvertedResidual(8, c1, 2), InvertedResidual(c1, c1, 1))
        self.stage2 = nn.Sequential(InvertedResidual(c1, c2, 2), InvertedResidual(c2, c2, 1))
        self.stage3 = nn.Sequential(InvertedResidual(c2, c3, 2), InvertedResidual(c3, c3, 1))
        self.channels = tuple(channels)

    def forward(self, x: Tensor) -> list[Tensor]:
        f1 = self.stage1(self.stem(x))
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        return [f1, f2, f3]


# --------------------------------------------------------------------------- full-size trunks


class WideResNetTrunk(nn.Module):
    def __init__(self, state_dict: dict | None = None):
        super().__init__()
        from torchvision.models import wide_resnet50_2

        net = wide_resnet50_2(weights=None)
        if state_dict is not None:
            net.load_state_dict(state_dict)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3 = net.layer1, net.layer2, net.layer3
        self.channels = TEACHER_CHANNELS["wide_resnet50_2"]

    def forward(self, x: Tensor) -> list[Tensor]:
        f1 = self.layer1(self.stem(x))
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        return [f1, f2, f3]


class EfficientNetTrunk(nn.Module):
    # indices into torchvision's efficientnet_b0().features
    TAPS = (2, 3, 5)

    def __init__(self, state_dict: dict | None = None):
        super().__init__()
        from torchvision.models import efficientnet_b0

        net = efficientnet_b0(weights=None)
        if state_dict is not None:
            net.load_state_dict(state_dict)
        self.features = net.features[: self.TAPS[-1] + 1]
        self.channels = STUDENT_CHANNELS["efficientnet_b0"]

    def forward(self, x: Tensor) -> list[Tensor]:
        out = []
        for i, block in enumerate(self.features):
            x = block(x)
            if i in self.TAPS:
                out.append(x)
        return out


# --------------------------------------------------------------------------- wrappers


class Teacher(nn.Module):
    """Frozen feature extractor; stays in eval mode whatever ``train()`` is called with."""

    def __init__(self, trunk: nn.Module):
        super().__init__()
        self.normalize = ImageNormalizer()
        self.trunk = trunk
        self.channels = trunk.channels
        for p in self.trunk.parameters():
            p.requires_grad_(False)
        self.trunk.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        self.trunk.eval()
        return self

    @torch.no_grad()
    def forward(self, image: Tensor, source: str = "teacher_on_xa", sample_ids=None) -> FeaturePyramid:
        return FeaturePyramid(self.trunk(self.normalize(image)), source, sample_ids)


class Student(nn.Module):
    def __init__(self, trunk: nn.Module, teacher_channels: Sequence[int]):
        super().__init__()
        self.normalize = ImageNormalizer()
        self.trunk = trunk
        self.proj = nn.ModuleList(
            nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)
            for cin, cout in zip(trunk.channels, teacher_channels)
        )

    def forward(self, image: Tensor, sample_ids=None) -> FeaturePyramid:
        feats = self.trunk(self.normalize(image))
        return FeaturePyramid([p(f) for p, f in zip(self.proj, feats)], "student_on_xa", sample_ids)


def build_teacher(cfg: Config) -> Teacher:
    if cfg.train.desk_scale:
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.train.teacher_seed)
        trunk = TinyResNetTrunk(cfg.model.desk_teacher_channels)
        torch.random.set_rng_state(gen_state)
        return Teacher(trunk)
    arch = cfg.backbone.teacher_arch
    if arch != "wide_resnet50_2":
        raise ConfigError(f"unsupported teacher_arch {arch!r}")
    return Teacher(WideResNetTrunk(_load_weights(arch, weights_dir(cfg))))


def build_student(cfg: Config, teacher_channels: Sequence[int]) -> Student:
    if cfg.train.desk_scale:
        if cfg.homogeneous:
            trunk = TinyResNetTrunk(cfg.model.desk_teacher_channels)
        else:
            trunk = TinyEfficientTrunk(cfg.model.desk_student_channels)
        return Student(trunk, teacher_channels)
    if cfg.homogeneous:
        return Student(WideResNetTrunk(None), teacher_channels)
    arch = cfg.backbone.student_arch
    if arch != "efficientnet_b0":
        raise ConfigError(f"unsupported student_arch {arch!r}")
    state = _load_weights(arch, weights_dir(cfg)) if cfg.backbone.student_pretrained else None
    return Student(EfficientNetTrunk(state), teacher_channels)


def parameter_count(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)
