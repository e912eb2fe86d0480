"""Gaussian heatmap codec and the PCK evaluation metric.

A heatmap stack holds one confidence grid per joint. encode places an
unnormalized Gaussian at each visible keypoint; decode recovers pixel
coordinates from the argmax cell plus a quarter-cell refinement. Both
directions and the metric are pure functions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import Pose

# Channels whose peak falls below this confidence decode as invisible.
CONFIDENCE_FLOOR = 0.05

# Joint indices used by the per-pose reference bone (head to shoulder midpoint).
HEAD_BONE_JOINTS = (0, 1, 2)


@dataclass(frozen=True)
class HeatmapStack:
    """J x H_h x W_h confidences in [0, 1] plus the image-pixels-per-cell stride."""

    values: np.ndarray
    stride: float

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValueError(f"heatmap stack must be (J, H, W), got shape {values.shape}")
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")
        object.__setattr__(self, "values", values)

    @property
    def num_joints(self) -> int:
        return int(self.values.shape[0])

    @property
    def resolution(self) -> tuple[int, int]:
        return (int(self.values.shape[1]), int(self.values.shape[2]))


@dataclass(frozen=True)
class PckReport:
    """Per-joint correctness fractions and their visibility-weighted total."""

    per_joint: tuple[float, ...]
    visible_counts: tuple[int, ...]
    total: float
    threshold: float


def encode(pose: Pose, sigma: float, resolution: tuple[int, int], stride: float) -> HeatmapStack:
    """Encode a pose as Gaussian confidence maps.

    Channel j evaluates exp(-((u - x_j/stride)^2 + (v - y_j/stride)^2) / (2 sigma^2))
    at integer cell coordinates (u, v); sigma is in heatmap cells. Channels of
    invisible keypoints are all zero.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    height, width = resolution
    us = np.arange(width, dtype=np.float64)
    vs = np.arange(height, dtype=np.float64)
    grid_u, grid_v = np.meshgrid(us, vs)
    values = np.zeros((pose.num_joints, height, width), dtype=np.float32)
    inv = 1.0 / (2.0 * sigma * sigma)
    for j in range(pose.num_joints):
        if not pose.visible[j]:
            continue
        cu = float(pose.xy[j, 0]) / stride
        cv = float(pose.xy[j, 1]) / stride
        values[j] = np.exp(-((grid_u - cu) ** 2 + (grid_v - cv) ** 2) * inv).astype(np.float32)
    return HeatmapStack(values=values, stride=float(stride))


def decode(stack: HeatmapStack, confidence_floor: float = CONFIDENCE_FLOOR) -> Pose:
    """Recover pixel coordinates from per-channel argmax cells.

    Ties break toward the smallest row-major index. A quarter-cell offset is
    added per axis toward the larger neighbor, only where both neighbors exist.
    Channels peaking below the confidence floor decode as invisible.
    """
    j, height, width = stack.values.shape
    xy = np.zeros((j, 2), dtype=np.float64)
    visible = np.zeros(j, dtype=bool)
    for c in range(j):
        channel = np.asarray(stack.values[c], dtype=np.float64)
        flat = int(np.argmax(channel))
        v, u = divmod(flat, width)
        peak = channel[v, u]
        visible[c] = bool(peak >= confidence_floor)
        du = 0.0
        dv = 0.0
        if 0 < u < width - 1:
            du = 0.25 * float(np.sign(channel[v, u + 1] - channel[v, u - 1]))
        if 0 < v < height - 1:
            dv = 0.25 * float(np.sign(channel[v + 1, u] - channel[v - 1, u]))
        xy[c, 0] = (u + du) * stack.stride
        xy[c, 1] = (v + dv) * stack.stride
    return Pose(xy=xy, visible=visible)


def _reference_lengths(ground_truth: list[Pose], reference: float | str) -> np.ndarray:
    if isinstance(reference, (int, float)):
        if reference <= 0:
            raise ValueError(f"fixed reference length must be positive, got {reference}")
        return np.full(len(ground_truth), float(reference))
    if reference == "head_bone":
        head, ls, rs = HEAD_BONE_JOINTS
        lengths = np.empty(len(ground_truth))
        for i, pose in enumerate(ground_truth):
            mid = 0.5 * (pose.xy[ls] + pose.xy[rs])
            lengths[i] = float(np.linalg.norm(pose.xy[head].astype(np.float64) - mid.astype(np.float64)))
            if lengths[i] <= 0:
                raise ValueError(f"pose {i} has a degenerate reference bone")
        return lengths
    raise ValueError(f"reference must be a pixel length or 'head_bone', got {reference!r}")


def pck(
    predictions: list[Pose],
    ground_truth: list[Pose],
    threshold: float,
    reference: float | str = "head_bone",
) -> PckReport:
    """Fraction of visible ground-truth joints predicted within
    threshold * reference length.

    Invisible ground-truth joints are excluded from both numerator and
    denominator; the total is the visibility-weighted mean of per_joint.
    """
    if len(predictions) == 0 or len(ground_truth) == 0:
        raise ValueError("pck is undefined on empty pose lists")
    if len(predictions) != len(ground_truth):
        raise ValueError(f"got {len(predictions)} predictions for {len(ground_truth)} ground-truth poses")
    refs = _reference_lengths(ground_truth, reference)
    j = ground_truth[0].num_joints
    correct = np.zeros(j, dtype=np.int64)
    visible = np.zeros(j, dtype=np.int64)
    for pred, gt, ref in zip(predictions, ground_truth, refs):
        if pred.num_joints != j or gt.num_joints != j:
            raise ValueError("all poses must share the same joint count")
        dist = np.linalg.norm(pred.xy.astype(np.float64) - gt.xy.astype(np.float64), axis=1)
        hit = dist <= threshold * ref
        visible += gt.visible.astype(np.int64)
        correct += (hit & gt.visible).astype(np.int64)
    per_joint = tuple(float(c) / v if v > 0 else 0.0 for c, v in zip(correct, visible))
    total_visible = int(visible.sum())
    if total_visible == 0:
        raise ValueError("no visible ground-truth joints; pck is undefined")
    total = float(correct.sum()) / total_visible
    return PckReport(
        per_joint=per_joint,
        visible_counts=tuple(int(v) for v in visible),
        total=total,
        threshold=float(threshold),
    )
