"""Render augmentation and heatmap previews for one labeled sample."""
from __future__ import annotations

import os

import numpy as np

from .augment import keypoint_mix, map_pose_easy_to_hard, mix_patch_rects, sample_affine, warp_image
from .datagen import DatasetError, Pose, load_coco_subset
from .heatmap import HeatmapStack, decode, encode
from .model import ArchConfig, init_network, forward, load_checkpoint
from .trainer import TrainingConfig
from .viz import (
    draw_markers,
    draw_rect_outlines,
    heatmap_overlay,
    hstack_panels,
    save_gray_png,
    save_heatmap_channels,
)


def render_preview(
    data_dir: str,
    out_dir: str,
    index: int = 0,
    seed: int = 0,
    km_k: int = 5,
    checkpoint: str | None = None,
    sigma: float = 2.0,
) -> list[str]:
    """Write view panels, ground-truth and predicted overlays, and per-joint
    heatmap channels for one labeled sample; deterministic in the seed.

    Without a checkpoint, patch centers come from the ground-truth pose and
    predictions from a freshly seeded network. With one, the mixing pose is
    the decoded easy-view teacher prediction carried into the hard frame,
    the same dataflow training uses. km_k is clamped to the visible count.
    """
    annotation_path = os.path.join(data_dir, "index.json")
    split, _ = load_coco_subset(annotation_path, data_dir)
    if not split.labeled:
        raise DatasetError(f"no labeled samples in {data_dir}")
    if not 0 <= index < len(split.labeled):
        raise DatasetError(f"sample index {index} out of range (have {len(split.labeled)} labeled)")
    sample = split.labeled[index]
    image = np.asarray(sample.image, dtype=np.float32)
    resolution = image.shape
    joints = sample.pose.num_joints

    if checkpoint is not None:
        loaded = load_checkpoint(checkpoint)
        params = loaded.networks.get("g") or next(iter(loaded.networks.values()))
        arch = params.arch
        if arch.image_size != resolution:
            raise DatasetError(
                f"checkpoint expects {arch.image_size} images but dataset has {resolution}"
            )
    else:
        stride = 2 if min(resolution) <= 64 else 4
        arch = ArchConfig(image_size=resolution, joints=joints, heatmap_stride=stride)
        params = init_network(seed, arch)

    kids = np.random.SeedSequence(int(seed)).spawn(3)
    rng_easy = np.random.default_rng(kids[0])
    rng_hard = np.random.default_rng(kids[1])
    t_easy = sample_affine(rng_easy, "easy", resolution)
    t_hard = sample_affine(rng_hard, "hard", resolution)
    easy = warp_image(image, t_easy)
    hard = warp_image(image, t_hard)

    stride = float(arch.heatmap_stride)
    if checkpoint is not None:
        teacher_z = forward(params, easy).level_z[0]
        pose_easy = decode(HeatmapStack(values=teacher_z, stride=stride))
        mix_pose = map_pose_easy_to_hard(pose_easy, t_easy, t_hard, resolution)
    else:
        xy_hard = t_hard.apply(sample.pose.xy)
        in_bounds = (
            (xy_hard[:, 0] >= 0)
            & (xy_hard[:, 0] <= resolution[1] - 1)
            & (xy_hard[:, 1] >= 0)
            & (xy_hard[:, 1] <= resolution[0] - 1)
        )
        mix_pose = Pose(xy=xy_hard, visible=sample.pose.visible & in_bounds)

    patch_half = TrainingConfig(sigma=sigma).patch_half_px(stride)
    k_eff = min(int(km_k), int(mix_pose.visible.sum()))
    if k_eff >= 1:
        # Two generators off the same seed child replay identical draws, so
        # the outlined rectangles match what keypoint_mix wrote.
        rng_mix = np.random.default_rng(kids[2])
        rng_rects = np.random.default_rng(kids[2])
        mixed = keypoint_mix(hard, mix_pose, k_eff, patch_half, rng_mix)
        rects = mix_patch_rects(mix_pose, k_eff, patch_half, rng_rects, resolution)
    else:
        mixed = hard.copy()
        rects = []

    os.makedirs(out_dir, exist_ok=True)
    files = []
    for name, img in (("original", image), ("easy", easy), ("hard", hard), ("mixed", mixed)):
        files.append(save_gray_png(img, os.path.join(out_dir, f"{name}.png")))
    files.append(save_gray_png(hstack_panels([image, easy, hard, mixed]), os.path.join(out_dir, "panel.png")))
    annotated = draw_rect_outlines(mixed, rects)
    files.append(
        save_gray_png(
            hstack_panels([image, easy, hard, annotated]), os.path.join(out_dir, "panel_annotated.png")
        )
    )

    gt_stack = encode(sample.pose, sigma, arch.heatmap_resolution, arch.heatmap_stride)
    pred_stack = HeatmapStack(values=forward(params, image).level_z[0], stride=stride)
    files.append(
        save_gray_png(
            draw_markers(heatmap_overlay(image, gt_stack), sample.pose),
            os.path.join(out_dir, "overlay_gt.png"),
        )
    )
    files.append(save_gray_png(heatmap_overlay(image, pred_stack), os.path.join(out_dir, "overlay_pred.png")))
    files.extend(save_heatmap_channels(gt_stack, out_dir, "heatmap_gt"))
    return files
