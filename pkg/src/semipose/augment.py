"""Affine view augmentation, heatmap re-mapping between views, and
keypoint patch mixing.

Easy and hard views differ only in how far rotation and scale may stray
from identity. All sampling reads an explicit numpy Generator, so callers
own determinism.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import Pose
from .heatmap import HeatmapStack

EASY_ROTATION_DEG = (-30.0, 30.0)
EASY_SCALE = (0.85, 1.15)
HARD_ROTATION_DEG = (-45.0, 45.0)
HARD_SCALE = (0.65, 1.35)

_MIN_DET = 1e-8


class AffineError(ValueError):
    """Raised for non-invertible transforms or bad mixing arguments."""


@dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix mapping source pixel (x, y, 1) to destination pixel."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.shape != (2, 3):
            raise AffineError(f"affine matrix must be 2x3, got {matrix.shape}")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 2]

    def determinant(self) -> float:
        a = self.linear
        return float(a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0])

    def inverse(self) -> "AffineTransform":
        det = self.determinant()
        if abs(det) < _MIN_DET:
            raise AffineError(f"transform is not invertible, |det| = {abs(det):.3e}")
        inv_linear = np.array(
            [[self.matrix[1, 1], -self.matrix[0, 1]], [-self.matrix[1, 0], self.matrix[0, 0]]]
        ) / det
        inv_translation = -inv_linear @ self.translation
        return AffineTransform(np.column_stack([inv_linear, inv_translation]))

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """Return self applied after other."""
        linear = self.linear @ other.linear
        translation = self.linear @ other.translation + self.translation
        return AffineTransform(np.column_stack([linear, translation]))

    def apply(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return xy @ self.linear.T + self.translation


def identity_transform() -> AffineTransform:
    return AffineTransform(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))


def sample_affine(
    rng: np.random.Generator,
    strength: str,
    resolution: tuple[int, int],
    rotation_deg: tuple[float, float] | None = None,
    scale_range: tuple[float, float] | None = None,
) -> AffineTransform:
    """Draw a rotation-plus-isotropic-scale transform about the image center.

    strength "easy" rotates within +-30 degrees and scales within
    [0.85, 1.15]; "hard" widens those to +-45 degrees and [0.65, 1.35].
    Explicit ranges override the strength presets. Draw order is fixed
    (rotation, then scale) so equal generator states give equal matrices.
    """
    if strength == "easy":
        rot = rotation_deg or EASY_ROTATION_DEG
        scl = scale_range or EASY_SCALE
    elif strength == "hard":
        rot = rotation_deg or HARD_ROTATION_DEG
        scl = scale_range or HARD_SCALE
    else:
        raise AffineError(f"strength must be 'easy' or 'hard', got {strength!r}")
    angle = np.deg2rad(rng.uniform(rot[0], rot[1]))
    scale = rng.uniform(scl[0], scl[1])
    height, width = resolution
    center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    cos, sin = np.cos(angle), np.sin(angle)
    linear = scale * np.array([[cos, -sin], [sin, cos]])
    translation = center - linear @ center
    return AffineTransform(np.column_stack([linear, translation]))


def _bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    # Out-of-bounds source reads contribute zero.
    height, width = image.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros(xs.shape, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            weight = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            valid = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
            values = image[np.clip(yi, 0, height - 1), np.clip(xi, 0, width - 1)]
            out += weight * np.where(valid, values, 0.0)
    return out


def warp_image(image: np.ndarray, transform: AffineTransform) -> np.ndarray:
    """Inverse-warp with bilinear sampling; zero fill outside the source."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise AffineError(f"warp_image expects a 2D grid, got shape {image.shape}")
    inv = transform.inverse()
    height, width = image.shape
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    src = inv.apply(np.column_stack([xs.ravel(), ys.ravel()]))
    warped = _bilinear_sample(image, src[:, 0].reshape(image.shape), src[:, 1].reshape(image.shape))
    return warped.astype(np.float32)


def cell_transform(pixel_transform: AffineTransform, stride: float) -> AffineTransform:
    """Express a pixel-space transform in heatmap-cell coordinates."""
    matrix = pixel_transform.matrix.copy()
    matrix[:, 2] /= stride
    return AffineTransform(matrix)


def easy_to_hard_transform(t_easy: AffineTransform, t_hard: AffineTransform) -> AffineTransform:
    """Pixel-space composite carrying easy-view coordinates into the hard view."""
    return t_hard.compose(t_easy.inverse())


def map_easy_to_hard(stack: HeatmapStack, t_easy: AffineTransform, t_hard: AffineTransform) -> HeatmapStack:
    """Warp every channel by t_hard composed with the inverse of t_easy.

    The composite acts in heatmap-cell coordinates (linear part unchanged,
    translation divided by the stride); bilinear sampling with zero fill,
    output clipped to [0, 1]. Bilinear warping is linear in the input
    values, so convex channel combinations map to the same combination of
    mapped channels.
    """
    composite = cell_transform(easy_to_hard_transform(t_easy, t_hard), stack.stride)
    inv = composite.inverse()
    j, height, width = stack.values.shape
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    src = inv.apply(np.column_stack([xs.ravel(), ys.ravel()]))
    sx = src[:, 0].reshape(height, width)
    sy = src[:, 1].reshape(height, width)
    mapped = np.empty_like(stack.values, dtype=np.float32)
    for c in range(j):
        mapped[c] = np.clip(_bilinear_sample(np.asarray(stack.values[c], dtype=np.float64), sx, sy), 0.0, 1.0)
    return HeatmapStack(values=mapped, stride=stack.stride)


def map_pose_easy_to_hard(
    pose: Pose, t_easy: AffineTransform, t_hard: AffineTransform, resolution: tuple[int, int]
) -> Pose:
    """Carry decoded easy-view keypoints into the hard view; points leaving
    the frame become invisible."""
    composite = easy_to_hard_transform(t_easy, t_hard)
    xy = composite.apply(pose.xy)
    height, width = resolution
    in_bounds = (xy[:, 0] >= 0) & (xy[:, 0] <= width - 1) & (xy[:, 1] >= 0) & (xy[:, 1] <= height - 1)
    return Pose(xy=xy, visible=pose.visible & in_bounds)


def keypoint_mix(
    image: np.ndarray,
    predicted_pose: Pose,
    k: int,
    patch_half: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Average square patches around k sampled visible keypoints and write
    the blend back over each source location.

    Patch centers are clamped so the full (2 * patch_half + 1)^2 patch fits
    inside the image. Sampling is uniform without replacement; writes happen
    in ascending joint index order, so overlapping patches resolve to the
    later write. k=0 and k=1 leave the image unchanged.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise AffineError(f"keypoint_mix expects a 2D image, got shape {image.shape}")
    if patch_half < 1:
        raise AffineError(f"patch_half must be >= 1, got {patch_half}")
    if k < 0:
        raise AffineError(f"k must be >= 0, got {k}")
    out = image.copy()
    if k == 0:
        return out
    visible_idx = np.flatnonzero(predicted_pose.visible)
    if k > len(visible_idx):
        raise AffineError(
            f"requested {k} patches but only {len(visible_idx)} keypoints are visible; "
            "fall back to k = visible count"
        )
    height, width = image.shape
    side = 2 * patch_half + 1
    if side > height or side > width:
        raise AffineError(f"patch side {side} exceeds image size {image.shape}")
    chosen = np.sort(rng.choice(visible_idx, size=k, replace=False))
    centers = []
    for j in chosen:
        cx = int(np.clip(np.rint(predicted_pose.xy[j, 0]), patch_half, width - 1 - patch_half))
        cy = int(np.clip(np.rint(predicted_pose.xy[j, 1]), patch_half, height - 1 - patch_half))
        centers.append((cy, cx))
    patches = [image[cy - patch_half : cy + patch_half + 1, cx - patch_half : cx + patch_half + 1] for cy, cx in centers]
    blend = np.mean(np.stack(patches, axis=0), axis=0, dtype=np.float64).astype(image.dtype)
    for cy, cx in centers:
        out[cy - patch_half : cy + patch_half + 1, cx - patch_half : cx + patch_half + 1] = blend
    return out


def mix_patch_rects(
    predicted_pose: Pose, k: int, patch_half: int, rng: np.random.Generator, resolution: tuple[int, int]
) -> list[tuple[int, int, int, int]]:
    """Replay the patch rectangles (y0, x0, y1, x1) keypoint_mix would write
    for the same generator state; used by preview annotation."""
    height, width = resolution
    visible_idx = np.flatnonzero(predicted_pose.visible)
    if k == 0 or k > len(visible_idx):
        return []
    chosen = np.sort(rng.choice(visible_idx, size=k, replace=False))
    rects = []
    for j in chosen:
        cx = int(np.clip(np.rint(predicted_pose.xy[j, 0]), patch_half, width - 1 - patch_half))
        cy = int(np.clip(np.rint(predicted_pose.xy[j, 1]), patch_half, height - 1 - patch_half))
        rects.append((cy - patch_half, cx - patch_half, cy + patch_half, cx + patch_half))
    return rects
