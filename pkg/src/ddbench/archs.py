"""Architecture registry used for teachers and evaluation students."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn
from torchvision import models as tvm


class ArchError(ValueError):
    pass


class ConvNetSmall(nn.Module):
    """Three conv-BN-ReLU blocks and a linear head; the desk-scale workhorse."""

    def __init__(self, num_classes: int, channels: int = 3, width: int = 32):
        super().__init__()
        w = width

        def block(cin, cout, pool=True):
            layers = [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
            if pool:
                layers.append(nn.AvgPool2d(2))
            return layers

        self.features = nn.Sequential(*block(channels, w), *block(w, 2 * w), *block(2 * w, 4 * w, pool=False))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(4 * w, num_classes)

    def embed(self, x):
        return torch.flatten(self.pool(self.features(x)), 1)

    def forward(self, x):
        return self.classifier(self.embed(x))


def _resnet(builder):
    def make(num_classes: int, resolution: int) -> nn.Module:
        m = builder(num_classes=num_classes)
        if resolution <= 64:
            # small-image stem: 3x3 stride-1 conv, no max-pool
            m.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
            m.maxpool = nn.Identity()
        return m
    return make


@dataclass(frozen=True)
class ArchInfo:
    build: Callable[[int, int], nn.Module]
    min_resolution: int = 8
    divisor: int = 1
    has_bn: bool = True


ARCHS: dict[str, ArchInfo] = {
    "convnet-small": ArchInfo(lambda k, r: ConvNetSmall(k), min_resolution=8),
    "resnet18": ArchInfo(_resnet(tvm.resnet18), min_resolution=16),
    "resnet50": ArchInfo(_resnet(tvm.resnet50), min_resolution=16),
    "resnet101": ArchInfo(_resnet(tvm.resnet101), min_resolution=16),
    "mobilenetv2": ArchInfo(lambda k, r: tvm.mobilenet_v2(num_classes=k), min_resolution=32),
    "efficientnetb0": ArchInfo(lambda k, r: tvm.efficientnet_b0(num_classes=k), min_resolution=32),
    "shufflenetv2x05": ArchInfo(lambda k, r: tvm.shufflenet_v2_x0_5(num_classes=k), min_resolution=32),
    "alexnet": ArchInfo(lambda k, r: tvm.alexnet(num_classes=k), min_resolution=64, has_bn=False),
    "swinv2t": ArchInfo(lambda k, r: tvm.swin_v2_t(num_classes=k), min_resolution=32, divisor=32, has_bn=False),
    "vitb16": ArchInfo(lambda k, r: tvm.vit_b_16(num_classes=k, image_size=r), min_resolution=32, divisor=16,
                       has_bn=False),
}


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    resolution: int
    num_classes: int

    def __post_init__(self):
        info = ARCHS.get(self.arch)
        if info is None:
            raise ArchError(f"unknown architecture {self.arch!r}; registry: {sorted(ARCHS)}")
        if self.resolution < info.min_resolution or self.resolution % info.divisor:
            raise ArchError(f"{self.arch} cannot take {self.resolution}px inputs")
        if self.num_classes < 2:
            raise ArchError("num_classes must be >= 2")


def build_model(spec: ModelSpec, seed: int | None = None) -> nn.Module:
    """Fresh, architecture-standard random init; seeded without touching global RNG state."""
    info = ARCHS[spec.arch]
    if seed is None:
        return info.build(spec.num_classes, spec.resolution)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return info.build(spec.num_classes, spec.resolution)
