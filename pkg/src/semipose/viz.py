"""PNG emission for previews: view panels, heatmap channels, overlays."""
from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .datagen import Pose
from .heatmap import HeatmapStack

PANEL_SEPARATOR = 2


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_gray_png(image: np.ndarray, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(to_uint8(image), mode="L").save(path)
    return path


def hstack_panels(images: list[np.ndarray], separator_value: float = 1.0) -> np.ndarray:
    """Place equally sized grids side by side with a thin bright separator."""
    if not images:
        raise ValueError("need at least one panel image")
    height = images[0].shape[0]
    parts: list[np.ndarray] = []
    for i, img in enumerate(images):
        if img.shape[0] != height:
            raise ValueError("panel images must share their height")
        if i > 0:
            parts.append(np.full((height, PANEL_SEPARATOR), separator_value, dtype=np.float32))
        parts.append(np.asarray(img, dtype=np.float32))
    return np.concatenate(parts, axis=1)


def heatmap_overlay(image: np.ndarray, stack: HeatmapStack) -> np.ndarray:
    """Blend an image with the per-pixel max over upsampled channels."""
    combined = np.max(np.asarray(stack.values, dtype=np.float32), axis=0)
    factor = int(round(stack.stride))
    upsampled = np.repeat(np.repeat(combined, factor, axis=0), factor, axis=1)
    height, width = image.shape
    upsampled = upsampled[:height, :width]
    canvas = np.zeros_like(np.asarray(image, dtype=np.float32))
    canvas[: upsampled.shape[0], : upsampled.shape[1]] = upsampled
    return 0.5 * np.asarray(image, dtype=np.float32) + 0.5 * canvas


def draw_markers(image: np.ndarray, pose: Pose, value: float = 1.0, arm: int = 2) -> np.ndarray:
    """Small crosses at visible keypoints."""
    out = np.asarray(image, dtype=np.float32).copy()
    height, width = out.shape
    for j in range(pose.num_joints):
        if not pose.visible[j]:
            continue
        x = int(np.rint(pose.xy[j, 0]))
        y = int(np.rint(pose.xy[j, 1]))
        for d in range(-arm, arm + 1):
            if 0 <= y + d < height and 0 <= x < width:
                out[y + d, x] = value
            if 0 <= y < height and 0 <= x + d < width:
                out[y, x + d] = value
    return out


def draw_rect_outlines(
    image: np.ndarray, rects: list[tuple[int, int, int, int]], value: float = 1.0
) -> np.ndarray:
    """One-pixel outlines for (y0, x0, y1, x1) rectangles, bounds inclusive."""
    out = np.asarray(image, dtype=np.float32).copy()
    height, width = out.shape
    for y0, x0, y1, x1 in rects:
        y0c, y1c = max(y0, 0), min(y1, height - 1)
        x0c, x1c = max(x0, 0), min(x1, width - 1)
        out[y0c : y1c + 1, [x0c, x1c]] = value
        out[[y0c, y1c], x0c : x1c + 1] = value
    return out


def save_heatmap_channels(stack: HeatmapStack, out_dir: str, prefix: str) -> list[str]:
    """One grayscale-ramp PNG per channel."""
    paths = []
    for j in range(stack.num_joints):
        path = os.path.join(out_dir, f"{prefix}_{j:02d}.png")
        save_gray_png(np.asarray(stack.values[j]), path)
        paths.append(path)
    return paths
