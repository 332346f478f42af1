"""ResNet-50 feature extractor and the plain classification baseline.

The extractor exposes the four stage outputs (strides 4/8/16/32) that the
pyramid and part-mining models build on. Parameter names follow the widely
used torchvision layout (conv1, bn1, layer1..layer4, blocks with
conv1/bn1..conv3/bn3, downsample), so an ImageNet-pretrained ResNet-50 state
dict can be loaded directly as a warm start.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import InputTooSmall, ShapeMismatch

MIN_INPUT_SIZE = 64

STAGE_CHANNELS = (256, 512, 1024, 2048)
STAGE_STRIDES = (4, 8, 16, 32)


@dataclass
class FeatureStack:
    """Stage outputs c2..c5 of one extractor pass (B x C x H x W each)."""

    c2: Tensor
    c3: Tensor
    c4: Tensor
    c5: Tensor

    channels = STAGE_CHANNELS
    strides = STAGE_STRIDES

    def levels(self) -> dict[str, Tensor]:
        return {"c2": self.c2, "c3": self.c3, "c4": self.c4, "c5": self.c5}


class Bottleneck(nn.Module):
    """1x1 -> 3x3 -> 1x1 residual block; activation f after the addition.

    The skip path is the identity when shapes agree and a strided 1x1
    projection otherwise. The 3x3 conv carries the stride (the layout
    pretrained torchvision checkpoints use).
    """

    def __init__(self, in_channels: int, mid_channels: int, out_channels: int,
                 stride: int = 1, post_op: nn.Module | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.conv1 = nn.Conv2d(in_channels, mid_channels, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid_channels)
        self.conv2 = nn.Conv2d(mid_channels, mid_channels, 3, stride=stride,
                               padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid_channels)
        self.conv3 = nn.Conv2d(mid_channels, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.downsample = None
        self.post_op = post_op if post_op is not None else self.relu

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"residual_block: expected {self.in_channels} input channels, "
                f"got {x.shape[1]}")
        identity = self.downsample(x) if self.downsample is not None else x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.post_op(out + identity)


def _stage(in_channels: int, mid_channels: int, out_channels: int,
           blocks: int, stride: int) -> nn.Sequential:
    layers = [Bottleneck(in_channels, mid_channels, out_channels, stride)]
    layers += [Bottleneck(out_channels, mid_channels, out_channels)
               for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


def init_conv_bn(module: nn.Module) -> None:
    """Kaiming conv init, unit-gain BN; used by every model as the random fallback."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)


class ResNet50Features(nn.Module):
    """Bottom-up ResNet-50 trunk returning the c2..c5 feature stack."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer1 = _stage(64, 64, 256, blocks=3, stride=1)
        self.layer2 = _stage(256, 128, 512, blocks=4, stride=2)
        self.layer3 = _stage(512, 256, 1024, blocks=6, stride=2)
        self.layer4 = _stage(1024, 512, 2048, blocks=3, stride=2)
        init_conv_bn(self)

    def forward(self, x: Tensor) -> FeatureStack:
        if x.shape[-2] < MIN_INPUT_SIZE or x.shape[-1] < MIN_INPUT_SIZE:
            raise InputTooSmall(
                f"extract_features: input {tuple(x.shape[-2:])} below "
                f"{MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}")
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        c2 = self.layer1(x)
        c3 = self.layer2(c2)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        return FeatureStack(c2, c3, c4, c5)


def load_backbone_state(extractor: ResNet50Features, path: str) -> None:
    """Load pretrained trunk weights from a (torchvision-layout) state dict file.

    Classifier entries (fc.*) in the file are ignored; every trunk parameter
    must be present.
    """
    state = torch.load(path, map_location="cpu", weights_only=True)
    if "state_dict" in state:  # tolerate full-checkpoint containers
        state = state["state_dict"]
    trunk = {k: v for k, v in state.items() if not k.startswith("fc.")}
    missing, unexpected = extractor.load_state_dict(trunk, strict=False)
    if missing:
        raise ShapeMismatch(f"load_backbone_state: missing keys {missing[:5]}...")
    if unexpected:
        raise ShapeMismatch(f"load_backbone_state: unexpected keys {unexpected[:5]}...")


class ImageClassifier(nn.Module):
    """Shared surface every pestclf model implements for training and eval."""

    tag = "base"

    def training_branches(self, images: Tensor,
                          labels: Tensor) -> list[tuple[Tensor, Tensor]]:
        """(logits, targets) pairs whose cross-entropies sum to the train loss."""
        return [(self(images), labels)]

    def predict_proba(self, images: Tensor) -> Tensor:
        """Class probabilities used for validation, testing, and export."""
        return torch.softmax(self(images), dim=-1)

    def class_scores(self, images: Tensor) -> Tensor:
        """Logits the Grad-CAM target score is read from."""
        return self(images)

    @property
    def gradcam_layer(self) -> nn.Module:
        raise NotImplementedError


class ResNet50Classifier(ImageClassifier):
    """Baseline model: trunk, global average pool, dropout, linear head."""

    tag = "resnet50"

    def __init__(self, num_classes: int, drop_rate: float = 0.3,
                 pretrained_path: str | None = None):
        super().__init__()
        self.extractor = ResNet50Features()
        if pretrained_path:
            load_backbone_state(self.extractor, pretrained_path)
        self.dropout = nn.Dropout(drop_rate)
        self.fc = nn.Linear(STAGE_CHANNELS[-1], num_classes)

    def features(self, images: Tensor) -> FeatureStack:
        return self.extractor(images)

    def head(self, c5: Tensor) -> Tensor:
        pooled = F.adaptive_avg_pool2d(c5, 1).flatten(1)
        return self.fc(self.dropout(pooled))

    def forward(self, images: Tensor) -> Tensor:
        return self.head(self.extractor(images).c5)

    @property
    def gradcam_layer(self) -> nn.Module:
        return self.extractor.layer4
