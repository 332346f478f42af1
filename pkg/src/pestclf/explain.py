"""Grad-CAM heatmaps over the last feature-extractor block of any model.

Channel weights are the spatial mean of the target score's gradient at the
chosen block; the map is the ReLU of the weighted channel sum, normalized
to max 1 (an all-zero map stays all-zero). For the multi-branch model the
map is computed on the raw branch, which consumes the full image.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import LabelOutOfRange, UnsupportedLayer, WriteFailure
from .resnet import ImageClassifier

OVERLAY_ALPHA = 0.4  # heatmap weight in the blend


@dataclass
class Heatmap:
    values: np.ndarray  # h x w, in [0, 1]
    source_layer: str
    target_class: int


def grad_cam(model: ImageClassifier, image: torch.Tensor,
             target_class: int | None = None) -> Heatmap:
    """Class activation map for one image (3xHxW, normalized).

    ``target_class`` defaults to the predicted class.
    """
    try:
        layer = model.gradcam_layer
    except NotImplementedError:
        raise UnsupportedLayer(
            f"grad_cam: model {type(model).__name__} exposes no extractor block"
        ) from None
    if image.dim() == 3:
        image = image.unsqueeze(0)

    captured: dict[str, torch.Tensor] = {}

    def forward_hook(_module, _inputs, output):
        captured["activation"] = output
        output.register_hook(lambda grad: captured.__setitem__("gradient", grad))

    handle = layer.register_forward_hook(forward_hook)
    try:
        model.eval()
        with torch.enable_grad():
            scores = model.class_scores(image)
            if target_class is None:
                target_class = int(scores.argmax(dim=1))
            if not 0 <= target_class < scores.shape[1]:
                raise LabelOutOfRange(
                    f"grad_cam: class {target_class} outside [0, {scores.shape[1]})")
            model.zero_grad(set_to_none=True)
            scores[0, target_class].backward()
    finally:
        handle.remove()
    model.zero_grad(set_to_none=True)

    activation = captured["activation"][0].detach()
    gradient = captured["gradient"][0].detach()
    weights = gradient.mean(dim=(-2, -1))
    cam = F.relu((weights[:, None, None] * activation).sum(dim=0))
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    layer_name = next((name for name, mod in model.named_modules()
                       if mod is layer), type(layer).__name__)
    return Heatmap(cam.numpy(), layer_name, target_class)


def colorize(values: np.ndarray) -> np.ndarray:
    """Map [0,1] values to a blue->cyan->yellow->red ramp (uint8 HxWx3)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return (np.stack([r, g, b], axis=-1) * 255.0).round().astype(np.uint8)


def overlay(heatmap: Heatmap, image: np.ndarray, out_path: str | Path,
            alpha: float = OVERLAY_ALPHA) -> Path:
    """Blend the upsampled, colorized heatmap onto the image and save it.

    out = round((1 - alpha) * image + alpha * colormap(heatmap)), written as
    a standard image file. Bytes are deterministic for fixed inputs.
    """
    h, w = image.shape[:2]
    values = torch.from_numpy(np.ascontiguousarray(heatmap.values, dtype=np.float32))
    upsampled = F.interpolate(values[None, None], size=(h, w), mode="bilinear",
                              align_corners=False)[0, 0].numpy()
    color = colorize(upsampled)
    blended = ((1.0 - alpha) * image.astype(np.float64)
               + alpha * color.astype(np.float64))
    blended = np.clip(blended.round(), 0, 255).astype(np.uint8)
    out_path = Path(out_path)
    try:
        Image.fromarray(blended).save(out_path)
    except (OSError, ValueError) as exc:
        raise WriteFailure(f"overlay: cannot write {out_path}: {exc}") from exc
    return out_path
