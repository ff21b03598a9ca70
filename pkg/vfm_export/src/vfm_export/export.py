"""Batch export of dense patch-feature grids to SRMT blobs.

Images resize bilinearly to the nearest multiple of the model's patch size,
normalize with ImageNet statistics, and run through the frozen model in
eval mode; the selected transformer block's patch grid is written as one
float32 blob per image plus a manifest of shapes.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .models import PatchFeatureModel, load_model
from .srmt import save_tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ExportConfig:
    model_id: str = "dinov2_vitb14"
    layer: int = -3  # third-to-last transformer block
    out_dir: str = "features"

    def validate_layer(self, depth: int) -> None:
        if not -depth <= self.layer < depth:
            raise ValueError(f"layer {self.layer} outside model depth {depth}")


def nearest_multiple(value: int, base: int) -> int:
    return max(base, int(value / base + 0.5) * base)


def prepare_image(path: str | os.PathLike, patch_size: int) -> torch.Tensor:
    """Decode, resize to the patch grid, normalize. Returns (1, 3, H, W)."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        tw = nearest_multiple(rgb.width, patch_size)
        th = nearest_multiple(rgb.height, patch_size)
        if (tw, th) != (rgb.width, rgb.height):
            rgb = rgb.resize((tw, th), Image.BILINEAR)
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.array(IMAGENET_MEAN, dtype=np.float32)) \
        / np.array(IMAGENET_STD, dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)


def export_image(model: PatchFeatureModel, path: str | os.PathLike,
                 layer: int) -> np.ndarray:
    x = prepare_image(path, model.patch_size)
    grid = model.patch_features(x, layer)
    return grid.numpy().astype(np.float32)


def export(image_paths: list[str], cfg: ExportConfig,
           model: PatchFeatureModel | None = None) -> list[tuple[str, tuple]]:
    """Write one `<image_id>.srmt` per input; returns (id, shape) pairs."""
    if model is None:
        model = load_model(cfg.model_id)
    cfg.validate_layer(model.depth)
    os.makedirs(cfg.out_dir, exist_ok=True)
    written = []
    lines = []
    for path in image_paths:
        image_id = os.path.splitext(os.path.basename(path))[0]
        grid = export_image(model, path, cfg.layer)
        fname = f"{image_id}.srmt"
        save_tensor(os.path.join(cfg.out_dir, fname), grid)
        shape = "x".join(str(d) for d in grid.shape)
        lines.append(f"{image_id}\t{fname}\t{shape}")
        written.append((image_id, grid.shape))
    with open(os.path.join(cfg.out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    return written
