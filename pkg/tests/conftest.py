"""Shared fixtures: synthetic shape datasets and numeric helpers."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image, ImageDraw

SHAPE_CLASSES = {
    "disc_red": (215, 40, 40),
    "square_green": (40, 205, 45),
    "triangle_blue": (45, 60, 215),
}


def make_shape_dataset(root: Path, n_per_class: int = 100, size: int = 72,
                       seed: int = 0, classes: dict | None = None) -> Path:
    """Folder-per-class dataset of colored shapes on gray-noise backgrounds."""
    rng = np.random.default_rng(seed)
    classes = classes or SHAPE_CLASSES
    for name, color in classes.items():
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            gray = rng.integers(40, 216, (size, size), dtype=np.uint8)
            canvas = np.stack([gray] * 3, axis=-1)
            img = Image.fromarray(canvas)
            draw = ImageDraw.Draw(img)
            half = int(rng.integers(size // 6, size // 3))
            cy = int(rng.integers(half + 1, size - half - 1))
            cx = int(rng.integers(half + 1, size - half - 1))
            if name.startswith("disc"):
                draw.ellipse([cx - half, cy - half, cx + half, cy + half],
                             fill=color)
            elif name.startswith("square"):
                draw.rectangle([cx - half, cy - half, cx + half, cy + half],
                               fill=color)
            else:
                draw.polygon([(cx, cy - half), (cx - half, cy + half),
                              (cx + half, cy + half)], fill=color)
            img.save(folder / f"{name}_{i:04d}.png")
    return root


@pytest.fixture(scope="session")
def shape_root(tmp_path_factory) -> Path:
    """Small 3-class dataset (12 images per class) for plumbing tests."""
    root = tmp_path_factory.mktemp("shapes_small")
    return make_shape_dataset(root, n_per_class=12, size=72, seed=7)


def finite_diff_grad(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of a scalar function of x (in-place probes)."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.numel()):
        original = flat[i].item()
        flat[i] = original + eps
        upper = float(fn(x))
        flat[i] = original - eps
        lower = float(fn(x))
        flat[i] = original
        grad_flat[i] = (upper - lower) / (2.0 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = float(numeric.abs().max())
    return float((analytic - numeric).abs().max()) / max(scale, 1e-8)
