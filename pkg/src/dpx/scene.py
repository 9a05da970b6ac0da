"""Synthetic layered RGB-D scenes for shape checks and overfit training.

A scene stacks random rectangles/ellipses over a background plane. Layer i
gets class label ``1 + (i mod (num_classes - 1))`` and the constant depth
``1 - (i + 1) / (num_shapes + 1)``, so later (topmost) layers are strictly
closer to the camera. RGB is a per-class palette color plus seeded pixel
noise, clipped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .metrics import SegmentationMap
from .tensor import Tensor, RngState


@dataclass(frozen=True)
class SceneParams:
    height: int = 16
    width: int = 16
    num_classes: int = 4
    num_shapes: int = 3
    seed: int = 0
    min_half: int = 2
    min_visible: int = 8
    noise_std: float = 0.02

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"scene needs >= 2 classes, got {self.num_classes}")
        if self.num_shapes < 1:
            raise ConfigError(f"scene needs >= 1 shape, got {self.num_shapes}")
        if self.height < 4 or self.width < 4:
            raise ConfigError(f"scene geometry too small: {self.height}x{self.width}")


@dataclass
class SyntheticScene:
    rgb: Tensor       # [H, W, 3]
    depth: Tensor     # [H, W, 1]
    labels: SegmentationMap
    params: SceneParams


def generate_scene(params: SceneParams) -> SyntheticScene:
    """Deterministic per seed. Shape placements that would occlude an
    already-drawn class (or the background) below ``min_visible`` pixels
    are resampled, so every expected class stays present and learnable."""
    rng = RngState(params.seed)
    h, w = params.height, params.width
    palette = rng.uniform((params.num_classes, 3), low=0.15, high=0.9,
                          precision="double").data
    labels = np.zeros((h, w), dtype=np.int32)
    depth = np.ones((h, w), dtype=np.float64)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    max_half_y = max(params.min_half, h // 2 - 2)
    max_half_x = max(params.min_half, w // 2 - 2)
    min_vis = min(params.min_visible, (h * w) // (4 * (params.num_shapes + 1)))
    for i in range(params.num_shapes):
        cls = 1 + (i % (params.num_classes - 1))
        for _attempt in range(200):
            kind = rng.choice(("rect", "ellipse"))
            hy = int(rng.integers(params.min_half, max_half_y + 1))
            hx = int(rng.integers(params.min_half, max_half_x + 1))
            cy = int(rng.integers(hy, h - hy))
            cx = int(rng.integers(hx, w - hx))
            if kind == "rect":
                mask = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
            else:
                mask = ((yy - cy) / hy) ** 2 + ((xx - cx) / hx) ** 2 <= 1.0
            trial = labels.copy()
            trial[mask] = cls
            survivors = np.bincount(trial.reshape(-1), minlength=params.num_classes)
            drawn = {0} | {1 + (j % (params.num_classes - 1)) for j in range(i + 1)}
            if all(survivors[c] >= min_vis for c in drawn):
                break
        else:
            raise ConfigError(
                f"could not place shape {i} without occluding a class below "
                f"{min_vis} visible pixels"
            )
        labels = trial
        depth[mask] = 1.0 - (i + 1) / (params.num_shapes + 1)
    rgb = palette[labels] + rng.normal((h, w, 3), std=params.noise_std,
                                       precision="double").data
    rgb = np.clip(rgb, 0.0, 1.0)
    return SyntheticScene(
        rgb=Tensor(rgb, "single"),
        depth=Tensor(depth[:, :, None], "single"),
        labels=SegmentationMap(labels),
        params=params,
    )
