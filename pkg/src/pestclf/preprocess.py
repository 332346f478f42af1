"""Resize / crop / normalize chain used for both training and evaluation.

All operations take and return uint8 HxWx3 numpy arrays except
``normalize``, which produces the float32 CxHxW tensor layout the models
consume. Train mode applies a random crop, eval mode a center crop; random
crop is the only augmentation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ImageTooSmall

# Channel statistics of the ImageNet-pretrained backbone's input distribution.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class PreprocessSpec:
    """Parameters of the preprocessing chain for one model."""

    short_side: int = 256
    crop: int = 224
    mode: str = "eval"  # "train" or "eval"
    channel_mean: tuple[float, float, float] = IMAGENET_MEAN
    channel_std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if self.crop > self.short_side:
            raise ValueError(f"crop {self.crop} exceeds short_side {self.short_side}")
        if any(s <= 0 for s in self.channel_std):
            raise ValueError("channel_std components must be positive")

    def with_mode(self, mode: str) -> "PreprocessSpec":
        return PreprocessSpec(self.short_side, self.crop, mode,
                              self.channel_mean, self.channel_std)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def aspect_resize(image: np.ndarray, short_side: int) -> np.ndarray:
    """Resize so the smaller side equals ``short_side``, keeping aspect ratio.

    The longer side becomes round_half_up(long * short_side / short).
    """
    h, w = image.shape[:2]
    if h <= w:
        out_h, out_w = short_side, _round_half_up(w * short_side / h)
    else:
        out_h, out_w = _round_half_up(h * short_side / w), short_side
    if (out_h, out_w) == (h, w):
        return image
    resized = Image.fromarray(image).resize((out_w, out_h), Image.Resampling.BILINEAR)
    return np.asarray(resized)


def random_crop(image: np.ndarray, window: int, rng: np.random.Generator) -> np.ndarray:
    """Crop a window x window region at a uniformly random valid offset."""
    h, w = image.shape[:2]
    if h < window or w < window:
        raise ImageTooSmall(f"random_crop: image {h}x{w} smaller than window {window}")
    row = int(rng.integers(0, h - window + 1))
    col = int(rng.integers(0, w - window + 1))
    return image[row:row + window, col:col + window]


def center_crop(image: np.ndarray, window: int) -> np.ndarray:
    """Crop the centered window x window region (offsets floor((side-window)/2))."""
    h, w = image.shape[:2]
    if h < window or w < window:
        raise ImageTooSmall(f"center_crop: image {h}x{w} smaller than window {window}")
    row = (h - window) // 2
    col = (w - window) // 2
    return image[row:row + window, col:col + window]


def normalize(image: np.ndarray,
              mean: tuple[float, float, float] = IMAGENET_MEAN,
              std: tuple[float, float, float] = IMAGENET_STD) -> np.ndarray:
    """Scale pixels to [0,1], standardize per channel, return float32 CxHxW."""
    arr = image.astype(np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def apply_chain(image: np.ndarray, spec: PreprocessSpec,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Run the full resize -> crop -> normalize chain for one image."""
    image = aspect_resize(image, spec.short_side)
    if spec.mode == "train":
        if rng is None:
            raise ValueError("train-mode preprocessing needs an rng for the random crop")
        image = random_crop(image, spec.crop, rng)
    else:
        image = center_crop(image, spec.crop)
    return normalize(image, spec.channel_mean, spec.channel_std)
