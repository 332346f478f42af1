"""Multi-branch multi-scale attention classifier with box and part mining.

Three branches share one ResNet-50 extractor and one linear head: the raw
branch sees the full image, the object branch sees the crop located by
activation-based box mining (no box labels), and the training-only parts
branch sees the top-scoring sliding windows over the object's features.
At test time the prediction is the softmax of the averaged raw and object
logits.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ShapeMismatch, WindowTooLarge
from .resnet import (STAGE_CHANNELS, ImageClassifier, ResNet50Features,
                     init_conv_bn, load_backbone_state)

DEFAULT_WINDOWS = ((2, 2), (3, 3), (4, 4))  # in c5 cells
DEFAULT_TOP_K = (3, 2, 2)
DEFAULT_NMS_IOU = 0.25


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box: rows [row0, row1), cols [col0, col1)."""

    row0: int
    col0: int
    row1: int
    col1: int

    def __post_init__(self):
        if not (0 <= self.row0 < self.row1 and 0 <= self.col0 < self.col1):
            raise ValueError(f"degenerate box {self}")

    @property
    def height(self) -> int:
        return self.row1 - self.row0

    @property
    def width(self) -> int:
        return self.col1 - self.col0

    @property
    def area(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class AolmResult:
    """Located object box; fell_back marks an empty mask intersection."""

    box: BoundingBox
    fell_back: bool = False


@dataclass(frozen=True)
class PartProposal:
    box: BoundingBox
    score: float
    scale_id: int


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    inter_h = min(a.row1, b.row1) - max(a.row0, b.row0)
    inter_w = min(a.col1, b.col1) - max(a.col0, b.col0)
    if inter_h <= 0 or inter_w <= 0:
        return 0.0
    inter = inter_h * inter_w
    return inter / (a.area + b.area - inter)


def _as_2d(feature) -> np.ndarray:
    """Channel-aggregate a (C,h,w) map to (h,w); 2D inputs pass through."""
    if isinstance(feature, Tensor):
        feature = feature.detach().cpu().numpy()
    arr = np.asarray(feature, dtype=np.float64)
    if arr.ndim == 3:
        return arr.sum(axis=0)
    if arr.ndim == 2:
        return arr
    raise ShapeMismatch(f"expected a (C,h,w) or (h,w) map, got shape {arr.shape}")


def largest_component_bounds(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight bounds of the largest 4-connected True component, half-open cells.

    Ties go to the component found first in row-major scan order. None when
    the mask is empty.
    """
    mask = np.asarray(mask, dtype=bool)
    visited = np.zeros_like(mask)
    h, w = mask.shape
    best = None
    best_size = 0
    for r0 in range(h):
        for c0 in range(w):
            if not mask[r0, c0] or visited[r0, c0]:
                continue
            queue = deque([(r0, c0)])
            visited[r0, c0] = True
            size = 0
            rmin, rmax, cmin, cmax = r0, r0, c0, c0
            while queue:
                r, c = queue.popleft()
                size += 1
                rmin, rmax = min(rmin, r), max(rmax, r)
                cmin, cmax = min(cmin, c), max(cmax, c)
                for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] \
                            and not visited[nr, nc]:
                        visited[nr, nc] = True
                        queue.append((nr, nc))
            if size > best_size:
                best_size = size
                best = (rmin, cmin, rmax + 1, cmax + 1)
    return best


def _upsample_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of a boolean mask to the target grid."""
    h, w = mask.shape
    out_h, out_w = shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return mask[np.ix_(rows, cols)]


def aolm_locate(c4, c5, input_size: int) -> AolmResult:
    """Mine the object's bounding box from the c4/c5 activation masks.

    Each map is channel-summed, thresholded strictly above its own mean, and
    the two masks are intersected on the c4 grid (the c5 mask upsampled
    nearest-neighbor). The largest 4-connected component's tight cell bounds
    map to input pixels through the level stride. An empty intersection
    falls back to the whole image with ``fell_back=True``.
    """
    a4 = _as_2d(c4)
    a5 = _as_2d(c5)
    m4 = a4 > a4.mean()
    m5 = a5 > a5.mean()
    inter = m4 & _upsample_mask(m5, m4.shape)
    bounds = largest_component_bounds(inter)
    if bounds is None:
        return AolmResult(BoundingBox(0, 0, input_size, input_size), fell_back=True)
    h, w = m4.shape
    if input_size % h or input_size % w:
        raise ShapeMismatch(
            f"aolm_locate: input size {input_size} not divisible by grid {h}x{w}")
    stride_r, stride_c = input_size // h, input_size // w
    r0, c0, r1, c1 = bounds
    return AolmResult(BoundingBox(r0 * stride_r, c0 * stride_c,
                                  min(r1 * stride_r, input_size),
                                  min(c1 * stride_c, input_size)))


def appm_propose(c5, window_sizes=DEFAULT_WINDOWS, top_k=DEFAULT_TOP_K,
                 nms_iou: float = DEFAULT_NMS_IOU, stride: int = 1
                 ) -> list[PartProposal]:
    """Rank sliding windows over the activation map and keep the best per scale.

    Every placement of every window is scored by the mean activation inside
    it (channel-mean map). Per scale, proposals are taken greedily in
    descending score (ties in row-major placement order), discarding any box
    whose IoU with an already kept box of that scale exceeds ``nms_iou``,
    until ``top_k`` boxes are kept. Boxes are scaled to pixels by ``stride``.
    """
    if isinstance(c5, Tensor):
        arr = c5.detach().cpu().numpy().astype(np.float64)
    else:
        arr = np.asarray(c5, dtype=np.float64)
    act = arr.mean(axis=0) if arr.ndim == 3 else arr
    h, w = act.shape
    proposals: list[PartProposal] = []
    for scale_id, ((wh, ww), k) in enumerate(zip(window_sizes, top_k)):
        if wh > h or ww > w:
            raise WindowTooLarge(
                f"appm_propose: window {wh}x{ww} exceeds map {h}x{w}")
        placements = []
        for r in range(h - wh + 1):
            for c in range(w - ww + 1):
                score = float(act[r:r + wh, c:c + ww].mean())
                placements.append((score, BoundingBox(r, c, r + wh, c + ww)))
        # stable sort keeps row-major order among equal scores
        placements.sort(key=lambda p: -p[0])
        kept: list[tuple[float, BoundingBox]] = []
        for score, box in placements:
            if len(kept) >= k:
                break
            if all(box_iou(box, other) <= nms_iou for _, other in kept):
                kept.append((score, box))
        proposals.extend(
            PartProposal(
                BoundingBox(b.row0 * stride, b.col0 * stride,
                            b.row1 * stride, b.col1 * stride),
                score, scale_id)
            for score, b in kept)
    return proposals


@dataclass
class MmalOutputs:
    """Per-branch logits plus the mined boxes behind them."""

    raw_logits: Tensor
    object_logits: Tensor
    part_logits: Tensor | None  # B x N_parts x C, training phase only
    boxes: list[AolmResult] = field(default_factory=list)
    proposals: list[list[PartProposal]] | None = None


def mmal_predict(outputs: MmalOutputs) -> Tensor:
    """Test-time rule: softmax of the mean of raw and object logits."""
    return torch.softmax((outputs.raw_logits + outputs.object_logits) / 2.0, dim=-1)


def format_box_lines(paths: list[str], results: list[AolmResult]) -> str:
    """Inspection dump: one 'path row0 col0 row1 col1' line per image."""
    return "".join(
        f"{path} {r.box.row0} {r.box.col0} {r.box.row1} {r.box.col1}\n"
        for path, r in zip(paths, results))


class MmalNet(ImageClassifier):
    """Raw/object/parts classifier sharing one extractor and one head."""

    tag = "mmal"

    def __init__(self, num_classes: int, part_size: int = 224,
                 window_sizes=DEFAULT_WINDOWS, top_k=DEFAULT_TOP_K,
                 nms_iou: float = DEFAULT_NMS_IOU,
                 include_parts_at_test: bool = False, drop_rate: float = 0.0,
                 pretrained_path: str | None = None):
        super().__init__()
        self.part_size = part_size
        self.window_sizes = tuple(tuple(wsize) for wsize in window_sizes)
        self.top_k = tuple(top_k)
        self.nms_iou = nms_iou
        self.include_parts_at_test = include_parts_at_test
        self.extractor = ResNet50Features()
        self.dropout = nn.Dropout(drop_rate)
        self.fc = nn.Linear(STAGE_CHANNELS[-1], num_classes)
        init_conv_bn(self)
        if pretrained_path:
            load_backbone_state(self.extractor, pretrained_path)

    def head(self, c5: Tensor) -> Tensor:
        pooled = F.adaptive_avg_pool2d(c5, 1).flatten(1)
        return self.fc(self.dropout(pooled))

    def _crop_resize(self, image: Tensor, box: BoundingBox,
                     size: int) -> Tensor:
        crop = image[:, box.row0:box.row1, box.col0:box.col1]
        if crop.shape[-2:] == (size, size):
            return crop
        return F.interpolate(crop.unsqueeze(0), size=(size, size),
                             mode="bilinear", align_corners=False).squeeze(0)

    def forward(self, images: Tensor, phase: str = "train") -> MmalOutputs:
        if phase not in ("train", "test"):
            raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")
        if images.shape[-2] != images.shape[-1]:
            raise ShapeMismatch("mmal_forward: input must be square")
        input_size = images.shape[-1]
        stack = self.extractor(images)
        raw_logits = self.head(stack.c5)

        boxes = [aolm_locate(stack.c4[i], stack.c5[i], input_size)
                 for i in range(images.shape[0])]
        object_images = torch.stack([
            self._crop_resize(images[i], res.box, input_size)
            for i, res in enumerate(boxes)])
        object_stack = self.extractor(object_images)
        object_logits = self.head(object_stack.c5)

        part_logits = None
        proposals = None
        if phase == "train" or self.include_parts_at_test:
            proposals = []
            for i in range(images.shape[0]):
                c5_map = object_stack.c5[i]
                stride = input_size // c5_map.shape[-1]
                proposals.append(appm_propose(c5_map, self.window_sizes,
                                              self.top_k, self.nms_iou,
                                              stride=stride))
            # NMS may keep fewer boxes for some samples; trim to the common
            # count so the part batch stays rectangular
            parts_per_image = min(len(p) for p in proposals)
            if parts_per_image > 0:
                part_crops = [
                    self._crop_resize(object_images[i], p.box, self.part_size)
                    for i in range(images.shape[0])
                    for p in proposals[i][:parts_per_image]]
                logits = self.head(self.extractor(torch.stack(part_crops)).c5)
                part_logits = logits.view(images.shape[0], parts_per_image, -1)
        return MmalOutputs(raw_logits, object_logits, part_logits, boxes, proposals)

    def training_branches(self, images: Tensor,
                          labels: Tensor) -> list[tuple[Tensor, Tensor]]:
        out = self.forward(images, phase="train")
        branches = [(out.raw_logits, labels), (out.object_logits, labels)]
        if out.part_logits is not None:
            batch, n_parts, n_classes = out.part_logits.shape
            branches.append((out.part_logits.reshape(batch * n_parts, n_classes),
                             labels.repeat_interleave(n_parts)))
        return branches

    def predict_proba(self, images: Tensor) -> Tensor:
        return mmal_predict(self.forward(images, phase="test"))

    def class_scores(self, images: Tensor) -> Tensor:
        # Grad-CAM reads the raw branch (the one consuming the full image)
        return self.head(self.extractor(images).c5)

    @property
    def gradcam_layer(self) -> nn.Module:
        return self.extractor.layer4
