"""Procedural stick-figure datasets and COCO-style keypoint ingestion.

Images are single-channel float grids in [0, 1]. A figure is a tree of
bones rendered as anti-aliased segments with bright discs at the joints.
Generation is a pure function of (seed, config), so repeated calls are
byte-identical and per-sample work can run in parallel.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image


class DatasetError(ValueError):
    """Raised for invalid generation parameters or unreadable dataset files."""


JOINT_NAMES = ("head", "l_shoulder", "r_shoulder", "l_hand", "r_hand", "l_foot", "r_foot")


@dataclass(frozen=True)
class BoneSpec:
    """One edge of the skeleton tree, sampled child-from-parent.

    angle_deg is a cone measured from straight down (positive toward +x),
    length is a fraction of min(image height, image width).
    """

    parent: int
    child: int
    angle_deg: tuple[float, float]
    length: tuple[float, float]


DEFAULT_BONES = (
    BoneSpec(0, 1, (-65.0, -25.0), (0.14, 0.20)),   # head -> l_shoulder
    BoneSpec(0, 2, (25.0, 65.0), (0.14, 0.20)),     # head -> r_shoulder
    BoneSpec(1, 3, (-130.0, -10.0), (0.20, 0.30)),  # l_shoulder -> l_hand
    BoneSpec(2, 4, (10.0, 130.0), (0.20, 0.30)),    # r_shoulder -> r_hand
    BoneSpec(1, 5, (-35.0, -5.0), (0.38, 0.52)),    # l_shoulder -> l_foot
    BoneSpec(2, 6, (5.0, 35.0), (0.38, 0.52)),      # r_shoulder -> r_foot
)


@dataclass(frozen=True)
class SkeletonConfig:
    """Joint layout, bone geometry, and rendering knobs for the generator."""

    joint_names: tuple[str, ...] = JOINT_NAMES
    bones: tuple[BoneSpec, ...] = DEFAULT_BONES
    image_size: tuple[int, int] = (64, 64)  # (height, width)
    root_box: tuple[tuple[float, float], tuple[float, float]] = ((0.25, 0.75), (0.15, 0.35))
    margin: float = 4.0
    disc_radius: float = 1.6
    line_halfwidth: float = 0.7
    line_value: float = 0.8
    noise_std: float = 0.02
    occlusion_prob: float = 0.0
    max_attempts: int = 200

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def bone_length_px(self, bone: BoneSpec) -> tuple[float, float]:
        md = float(min(self.image_size))
        return (bone.length[0] * md, bone.length[1] * md)


@dataclass(frozen=True)
class Pose:
    """Ordered keypoint coordinates (x, y) in pixels with visibility flags."""

    xy: np.ndarray
    visible: np.ndarray

    def __post_init__(self) -> None:
        xy = np.asarray(self.xy, dtype=np.float32)
        visible = np.asarray(self.visible, dtype=bool)
        if xy.ndim != 2 or xy.shape[1] != 2:
            raise DatasetError(f"pose coordinates must be (J, 2), got {xy.shape}")
        if visible.shape != (xy.shape[0],):
            raise DatasetError(f"visibility must be (J,), got {visible.shape}")
        xy.setflags(write=False)
        visible.setflags(write=False)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "visible", visible)

    @property
    def num_joints(self) -> int:
        return int(self.xy.shape[0])


@dataclass(frozen=True)
class Sample:
    """One image with an optional ground-truth pose (absent means unlabeled)."""

    image: np.ndarray
    pose: Pose | None
    id: int

    def __post_init__(self) -> None:
        image = np.asarray(self.image, dtype=np.float32)
        if image.ndim != 2:
            raise DatasetError(f"image must be a 2D grayscale grid, got shape {image.shape}")
        image.setflags(write=False)
        object.__setattr__(self, "image", image)


@dataclass(frozen=True)
class DatasetSplit:
    """Labeled and unlabeled sample lists with disjoint ids."""

    labeled: tuple[Sample, ...]
    unlabeled: tuple[Sample, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "labeled", tuple(self.labeled))
        object.__setattr__(self, "unlabeled", tuple(self.unlabeled))
        ids = [s.id for s in self.labeled] + [s.id for s in self.unlabeled]
        if len(set(ids)) != len(ids):
            raise DatasetError("sample ids must be unique across labeled and unlabeled lists")
        n, m = len(self.labeled), len(self.unlabeled)
        if n > 0 and m > 0 and n > m:
            raise DatasetError(f"semi-supervised split expects n_labeled <= n_unlabeled, got {n} > {m}")


@dataclass(frozen=True)
class LoadReport:
    """Per-record problems collected while ingesting an annotation file."""

    n_labeled: int
    n_unlabeled: int
    n_skipped: int
    errors: tuple[str, ...] = ()


def _sample_pose(rng: np.random.Generator, cfg: SkeletonConfig) -> tuple[np.ndarray, np.ndarray]:
    # Rejection-resample until every joint sits inside the margin box.
    height, width = cfg.image_size
    md = float(min(cfg.image_size))
    j = cfg.num_joints
    (x_lo, x_hi), (y_lo, y_hi) = cfg.root_box
    for _ in range(cfg.max_attempts):
        xy = np.zeros((j, 2), dtype=np.float64)
        xy[0, 0] = rng.uniform(x_lo, x_hi) * width
        xy[0, 1] = rng.uniform(y_lo, y_hi) * height
        for bone in cfg.bones:
            angle = np.deg2rad(rng.uniform(*bone.angle_deg))
            length = rng.uniform(*bone.length) * md
            xy[bone.child, 0] = xy[bone.parent, 0] + length * np.sin(angle)
            xy[bone.child, 1] = xy[bone.parent, 1] + length * np.cos(angle)
        in_x = (xy[:, 0] >= cfg.margin) & (xy[:, 0] <= width - 1 - cfg.margin)
        in_y = (xy[:, 1] >= cfg.margin) & (xy[:, 1] <= height - 1 - cfg.margin)
        if np.all(in_x & in_y):
            visible = np.ones(j, dtype=bool)
            if cfg.occlusion_prob > 0.0:
                visible = rng.uniform(size=j) >= cfg.occlusion_prob
            return xy, visible
    raise DatasetError(f"no in-bounds pose found after {cfg.max_attempts} attempts; relax bone ranges or margin")


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab[0] * ab[0] + ab[1] * ab[1])
    if denom < 1e-12:
        return np.hypot(px - a[0], py - a[1])
    t = ((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def _coverage(dist: np.ndarray, radius: float, aa: float = 1.0) -> np.ndarray:
    # Linear edge ramp of width aa centered on the shape boundary.
    return np.clip((radius + 0.5 * aa - dist) / aa, 0.0, 1.0)


def _render(xy: np.ndarray, visible: np.ndarray, cfg: SkeletonConfig, rng: np.random.Generator) -> np.ndarray:
    height, width = cfg.image_size
    py, px = np.mgrid[0:height, 0:width].astype(np.float64)
    canvas = np.zeros((height, width), dtype=np.float64)
    for bone in cfg.bones:
        d = _segment_distance(px, py, xy[bone.parent], xy[bone.child])
        canvas = np.maximum(canvas, cfg.line_value * _coverage(d, cfg.line_halfwidth))
    # Discs only for visible joints, so occluded keypoints stay dark.
    for k in range(xy.shape[0]):
        if visible[k]:
            d = np.hypot(px - xy[k, 0], py - xy[k, 1])
            canvas = np.maximum(canvas, _coverage(d, cfg.disc_radius))
    if cfg.noise_std > 0.0:
        canvas = canvas + rng.normal(0.0, cfg.noise_std, size=canvas.shape)
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


def generate_scene(seed: int, skeleton_config: SkeletonConfig | None = None) -> Sample:
    """Render one labeled stick figure, fully determined by the seed."""
    cfg = skeleton_config or SkeletonConfig()
    if min(cfg.image_size) < 32:
        raise DatasetError(f"resolution below 32x32 is degenerate, got {cfg.image_size}")
    rng = np.random.default_rng(int(seed))
    xy, visible = _sample_pose(rng, cfg)
    image = _render(xy, visible, cfg, rng)
    return Sample(image=image, pose=Pose(xy=xy, visible=visible), id=int(seed))


def build_split(
    seed: int,
    n_labeled: int,
    n_unlabeled: int,
    skeleton_config: SkeletonConfig | None = None,
) -> DatasetSplit:
    """Generate a labeled/unlabeled split from disjoint per-sample seeds.

    Unlabeled samples are generated with poses and then stripped; a harness
    can recompute the oracle pose of unlabeled sample i by calling
    generate_scene(seed + n_labeled + i) with the same config.
    """
    if n_labeled < 1:
        raise DatasetError("need at least one labeled sample")
    if n_unlabeled < 0:
        raise DatasetError("n_unlabeled must be >= 0")
    cfg = skeleton_config or SkeletonConfig()
    labeled = tuple(generate_scene(seed + i, cfg) for i in range(n_labeled))
    unlabeled = tuple(
        Sample(image=s.image, pose=None, id=s.id)
        for s in (generate_scene(seed + n_labeled + i, cfg) for i in range(n_unlabeled))
    )
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled)


def _file_name(sample_id: int) -> str:
    return f"img_{sample_id:06d}.png"


def save_dataset(split: DatasetSplit, out_dir: str) -> str:
    """Write PNGs plus an index.json in the COCO-subset layout; returns the index path."""
    os.makedirs(out_dir, exist_ok=True)
    images = []
    annotations = []
    for sample in split.labeled + split.unlabeled:
        arr = np.rint(np.asarray(sample.image) * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(os.path.join(out_dir, _file_name(sample.id)))
        height, width = sample.image.shape
        images.append({"id": sample.id, "file_name": _file_name(sample.id), "width": width, "height": height})
        if sample.pose is not None:
            kps: list[float | int] = []
            for k in range(sample.pose.num_joints):
                kps.append(float(sample.pose.xy[k, 0]))
                kps.append(float(sample.pose.xy[k, 1]))
                kps.append(2 if bool(sample.pose.visible[k]) else 1)
            annotations.append({"image_id": sample.id, "keypoints": kps})
    index_path = os.path.join(out_dir, "index.json")
    with open(index_path, "w", encoding="utf-8") as f:
        json.dump({"images": images, "annotations": annotations}, f, indent=2)
        f.write("\n")
    return index_path


def load_coco_subset(annotation_path: str, image_dir: str) -> tuple[DatasetSplit, LoadReport]:
    """Load a COCO-subset index: annotated images become the labeled list,
    images without annotations the unlabeled list.

    Visibility flags follow the COCO keypoint convention: v of 0 or 1 maps
    to visible=False, v of 2 to visible=True. Records with problems (missing
    image file, bad keypoint count, duplicate or dangling annotations) are
    skipped and collected into the returned LoadReport.
    """
    if not os.path.isfile(annotation_path):
        raise DatasetError(f"annotation file not found: {annotation_path}")
    with open(annotation_path, "r", encoding="utf-8") as f:
        try:
            index = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"malformed JSON in {annotation_path} at byte offset {e.pos}: {e.msg}") from e
    if not isinstance(index, dict) or "images" not in index or "annotations" not in index:
        raise DatasetError(f"{annotation_path} must contain 'images' and 'annotations' lists")

    errors: list[str] = []
    ann_by_image: dict[int, list] = {}
    for ann in index["annotations"]:
        image_id = ann.get("image_id")
        if image_id in ann_by_image:
            errors.append(f"annotation for image {image_id}: duplicate annotation, keeping the first")
            continue
        ann_by_image[image_id] = ann

    expected_j: int | None = None
    labeled: list[Sample] = []
    unlabeled: list[Sample] = []
    seen_ids = set()
    for rec in index["images"]:
        image_id = rec.get("id")
        if image_id in seen_ids:
            errors.append(f"image {image_id}: duplicate image id, skipped")
            continue
        seen_ids.add(image_id)
        path = os.path.join(image_dir, rec.get("file_name", ""))
        if not os.path.isfile(path):
            errors.append(f"image {image_id}: file not found: {path}")
            continue
        try:
            with Image.open(path) as im:
                image = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        except OSError as e:
            errors.append(f"image {image_id}: failed to decode {path}: {e}")
            continue
        ann = ann_by_image.pop(image_id, None)
        if ann is None:
            unlabeled.append(Sample(image=image, pose=None, id=int(image_id)))
            continue
        kps = ann.get("keypoints", [])
        if len(kps) == 0 or len(kps) % 3 != 0:
            errors.append(f"image {image_id}: keypoints length {len(kps)} is not a positive multiple of 3")
            continue
        j = len(kps) // 3
        if expected_j is None:
            expected_j = j
        elif j != expected_j:
            errors.append(f"image {image_id}: {j} keypoints, expected {expected_j}")
            continue
        xy = np.array(kps, dtype=np.float64).reshape(j, 3)
        pose = Pose(xy=xy[:, :2], visible=xy[:, 2] >= 2)
        labeled.append(Sample(image=image, pose=pose, id=int(image_id)))

    for image_id in ann_by_image:
        errors.append(f"annotation for image {image_id}: no such image record")

    n_skipped = len(index["images"]) - len(labeled) - len(unlabeled)
    split = DatasetSplit(labeled=tuple(labeled), unlabeled=tuple(unlabeled))
    report = LoadReport(
        n_labeled=len(labeled), n_unlabeled=len(unlabeled), n_skipped=n_skipped, errors=tuple(errors)
    )
    return split, report
