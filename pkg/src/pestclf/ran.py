"""Residual attention classifier: stacked trunk/mask attention modules.

Each attention module computes H = (1 + M) * F where F is the trunk output
and M the mask branch's soft weights in [0,1]. The mask branch is an
hourglass: max-pool downsampling, residual processing, bilinear upsampling
back to the trunk's resolution, then two 1x1 convolutions and a sigmoid.
The default stack is the 56-layer configuration (one module per stage,
hourglass depths 3/2/1).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import InputTooSmall, ShapeMismatch
from .resnet import ImageClassifier, init_conv_bn

MIN_INPUT_SIZE = 32


class PreActBlock(nn.Module):
    """Pre-activation bottleneck residual unit (BN-ReLU before each conv)."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        mid = out_channels // 4
        self.bn1 = nn.BatchNorm2d(in_channels)
        self.conv1 = nn.Conv2d(in_channels, mid, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, out_channels, 1, bias=False)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride,
                                      bias=False)
        else:
            self.shortcut = None

    def forward(self, x: Tensor) -> Tensor:
        pre = F.relu(self.bn1(x))
        out = self.conv1(pre)
        out = self.conv2(F.relu(self.bn2(out)))
        out = self.conv3(F.relu(self.bn3(out)))
        skip = self.shortcut(pre) if self.shortcut is not None else x
        return out + skip


def _blocks(channels: int, count: int) -> nn.Sequential:
    return nn.Sequential(*[PreActBlock(channels, channels) for _ in range(count)])


class _Hourglass(nn.Module):
    """Bottom-up/top-down core of the mask branch: depth poolings, depth upsamples."""

    def __init__(self, channels: int, depth: int, r: int = 1):
        super().__init__()
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.down = _blocks(channels, r)
        if depth > 1:
            self.skip = PreActBlock(channels, channels)
            self.inner = _Hourglass(channels, depth - 1, r)
        else:
            self.skip = None
            self.inner = _blocks(channels, r)
        self.up = _blocks(channels, r)

    def forward(self, x: Tensor) -> Tensor:
        d = self.down(self.pool(x))
        mid = self.inner(d)
        if self.skip is not None:
            mid = mid + self.skip(d)
        u = self.up(mid)
        return F.interpolate(u, size=x.shape[-2:], mode="bilinear",
                             align_corners=False)


class MaskBranch(nn.Module):
    """Hourglass plus 1x1-conv head emitting soft weights in [0,1]."""

    def __init__(self, channels: int, downsamples: int, r: int = 1):
        super().__init__()
        self.channels = channels
        self.hourglass = _Hourglass(channels, downsamples, r)
        self.head = nn.Sequential(
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 1),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeMismatch(
                f"mask_branch: expected {self.channels} channels, got {x.shape[1]}")
        return self.head(self.hourglass(x))


def residual_attention(mask: Tensor, trunk: Tensor) -> Tensor:
    """Combine mask and trunk outputs: H = (1 + M) * F, elementwise."""
    if mask.shape != trunk.shape:
        raise ShapeMismatch(
            f"attention_module: mask {tuple(mask.shape)} vs trunk "
            f"{tuple(trunk.shape)}")
    return (1.0 + mask) * trunk


class AttentionModule(nn.Module):
    """One attention module; stashes its last M, F, H for inspection."""

    def __init__(self, channels: int, trunk_depth: int = 2, mask_downsamples: int = 1,
                 pre_blocks: int = 1, post_blocks: int = 1):
        super().__init__()
        self.channels = channels
        self.pre = _blocks(channels, pre_blocks)
        self.trunk = _blocks(channels, trunk_depth)
        self.mask = MaskBranch(channels, mask_downsamples)
        self.post = _blocks(channels, post_blocks)
        # detached copies of the most recent forward's tensors
        self.last_trunk: Tensor | None = None
        self.last_mask: Tensor | None = None
        self.last_output: Tensor | None = None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeMismatch(
                f"attention_module: expected {self.channels} channels, "
                f"got {x.shape[1]}")
        x = self.pre(x)
        f = self.trunk(x)
        m = self.mask(x)
        h = residual_attention(m, f)
        self.last_trunk = f.detach()
        self.last_mask = m.detach()
        self.last_output = h.detach()
        return self.post(h)


class ResidualAttentionNet(ImageClassifier):
    """Attention classifier: three attention stages between residual stages.

    Weights start from random initialization; there is no pretrained trunk
    for this architecture, which is known to cost accuracy relative to the
    warm-started models. Pass a torch state dict via ``warm_start_path`` to
    resume from an earlier run instead.
    """

    tag = "ran"

    def __init__(self, num_classes: int, drop_rate: float = 0.0,
                 modules_per_stage: tuple[int, int, int] = (1, 1, 1),
                 stage_downsamples: tuple[int, int, int] = (3, 2, 1),
                 warm_start_path: str | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.entry = PreActBlock(64, 256)
        self.stage1 = nn.Sequential(*[
            AttentionModule(256, mask_downsamples=stage_downsamples[0])
            for _ in range(modules_per_stage[0])])
        self.down1 = PreActBlock(256, 512, stride=2)
        self.stage2 = nn.Sequential(*[
            AttentionModule(512, mask_downsamples=stage_downsamples[1])
            for _ in range(modules_per_stage[1])])
        self.down2 = PreActBlock(512, 1024, stride=2)
        self.stage3 = nn.Sequential(*[
            AttentionModule(1024, mask_downsamples=stage_downsamples[2])
            for _ in range(modules_per_stage[2])])
        self.tail = nn.Sequential(
            PreActBlock(1024, 2048, stride=2),
            PreActBlock(2048, 2048),
            PreActBlock(2048, 2048),
        )
        self.final_bn = nn.BatchNorm2d(2048)
        self.dropout = nn.Dropout(drop_rate)
        self.fc = nn.Linear(2048, num_classes)
        init_conv_bn(self)
        if warm_start_path:
            state = torch.load(warm_start_path, map_location="cpu", weights_only=True)
            self.load_state_dict(state)

    def attention_modules(self) -> list[AttentionModule]:
        return [m for m in self.modules() if isinstance(m, AttentionModule)]

    def forward(self, images: Tensor) -> Tensor:
        if images.shape[-2] < MIN_INPUT_SIZE or images.shape[-1] < MIN_INPUT_SIZE:
            raise InputTooSmall(
                f"ran_forward: input {tuple(images.shape[-2:])} below "
                f"{MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}")
        x = self.maxpool(F.relu(self.bn1(self.conv1(images))))
        x = self.stage1(self.entry(x))
        x = self.stage2(self.down1(x))
        x = self.stage3(self.down2(x))
        x = F.relu(self.final_bn(self.tail(x)))
        pooled = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(self.dropout(pooled))

    @property
    def gradcam_layer(self) -> nn.Module:
        return self.tail
