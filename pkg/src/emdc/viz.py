"""Depth visualizations with a fixed colormap and fixed range."""

from __future__ import annotations

import numpy as np
from matplotlib import colormaps
from PIL import Image

CMAP = "turbo"
RANGE = (0.3, 8.0)


def colorize(depth: np.ndarray, vmin: float = RANGE[0], vmax: float = RANGE[1]) -> np.ndarray:
    """(H, W) depth in meters -> (H, W, 3) uint8; zero (invalid) pixels are black."""
    d = np.asarray(depth, dtype=np.float64)
    t = np.clip((d - vmin) / (vmax - vmin), 0.0, 1.0)
    rgb = (colormaps[CMAP](t)[..., :3] * 255).round().astype(np.uint8)
    rgb[d <= 0] = 0
    return rgb


def save_depth_png(path, depth, vmin: float = RANGE[0], vmax: float = RANGE[1]) -> None:
    Image.fromarray(colorize(depth, vmin, vmax)).save(path)


def save_panel(path, rgb, sparse, pred, gt) -> None:
    """Side-by-side rgb | sparse | prediction | ground truth."""
    tiles = [(np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)] + [colorize(x) for x in (sparse, pred, gt)]
    Image.fromarray(np.concatenate(tiles, axis=1)).save(path)
