"""Feature-pyramid classification head over the ResNet-50 extractor.

Top-down construction: P5 is the smoothed 1x1-projected c5; every lower
level merges the 1x1-projected bottom-up map with the nearest-neighbor
upsampled level above it, then applies a 3x3 smoothing convolution. All
levels share the pyramid width d. Each level is global-average-pooled and
the four vectors are concatenated into a single linear classifier
(``per_level_heads=True`` switches to one classifier per level with
averaged logits).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ShapeMismatch
from .resnet import (STAGE_CHANNELS, FeatureStack, ImageClassifier,
                     ResNet50Features, init_conv_bn, load_backbone_state)

PYRAMID_WIDTH = 256
LEVELS = ("p2", "p3", "p4", "p5")


@dataclass
class PyramidStack:
    """Pyramid levels p2..p5, all with the same channel width."""

    p2: Tensor
    p3: Tensor
    p4: Tensor
    p5: Tensor

    def levels(self) -> dict[str, Tensor]:
        return {"p2": self.p2, "p3": self.p3, "p4": self.p4, "p5": self.p5}


def upsample_to(top_down: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbor upsample; for exact 2x this repeats each value 2x2."""
    return F.interpolate(top_down, size=size, mode="nearest")


class FPNClassifier(ImageClassifier):
    """Pyramid-pooled classifier over the four extractor stages."""

    tag = "fpn"

    def __init__(self, num_classes: int, d: int = PYRAMID_WIDTH,
                 drop_rate: float = 0.0, per_level_heads: bool = False,
                 pretrained_path: str | None = None):
        super().__init__()
        self.d = d
        self.extractor = ResNet50Features()
        self.lateral = nn.ModuleDict({
            name: nn.Conv2d(ch, d, 1)
            for name, ch in zip(("c2", "c3", "c4", "c5"), STAGE_CHANNELS)
        })
        self.smooth = nn.ModuleDict({
            name: nn.Conv2d(d, d, 3, padding=1) for name in LEVELS
        })
        self.per_level_heads = per_level_heads
        self.dropout = nn.Dropout(drop_rate)
        if per_level_heads:
            self.heads = nn.ModuleList(
                [nn.Linear(d, num_classes) for _ in LEVELS])
        else:
            self.fc = nn.Linear(len(LEVELS) * d, num_classes)
        init_conv_bn(self)
        if pretrained_path:
            load_backbone_state(self.extractor, pretrained_path)

    def lateral_merge(self, c_level: Tensor, top_down: Tensor, name: str) -> Tensor:
        """conv1x1(c_level) + 2x-upsampled top_down, both at width d."""
        projected = self.lateral[name](c_level)
        up = upsample_to(top_down, projected.shape[-2:])
        if up.shape != projected.shape:
            raise ShapeMismatch(
                f"lateral_merge: {tuple(up.shape)} vs {tuple(projected.shape)}")
        return projected + up

    def pyramid(self, stack: FeatureStack) -> PyramidStack:
        p5 = self.smooth["p5"](self.lateral["c5"](stack.c5))
        p4 = self.smooth["p4"](self.lateral_merge(stack.c4, p5, "c4"))
        p3 = self.smooth["p3"](self.lateral_merge(stack.c3, p4, "c3"))
        p2 = self.smooth["p2"](self.lateral_merge(stack.c2, p3, "c2"))
        return PyramidStack(p2, p3, p4, p5)

    def classify_stack(self, stack: FeatureStack) -> Tensor:
        pyr = self.pyramid(stack)
        pooled = [F.adaptive_avg_pool2d(t, 1).flatten(1)
                  for t in pyr.levels().values()]
        if self.per_level_heads:
            logits = [head(self.dropout(vec))
                      for head, vec in zip(self.heads, pooled)]
            return torch.stack(logits).mean(dim=0)
        return self.fc(self.dropout(torch.cat(pooled, dim=1)))

    def features(self, images: Tensor) -> FeatureStack:
        return self.extractor(images)

    def forward(self, images: Tensor) -> Tensor:
        return self.classify_stack(self.extractor(images))

    @property
    def gradcam_layer(self) -> nn.Module:
        return self.extractor.layer4
