"""Dual-network semi-supervised training with EMA reviewer shadows.

Two networks g and f alternate teacher and student roles. Each carries a
reviewer, an exponential moving average of its parameter history, that
emits extra consistency targets. Per step: unlabeled images get an easy
view (teachers) and a hard view (students, optionally keypoint-mixed
around the teacher's decoded joints); the supervised loss covers all four
networks at the enabled head levels; the two consistency losses send
gradients only to their student. All four networks take their gradient
slice of the one total loss, and only then do the reviewers blend toward
their sources by EMA.
"""
from __future__ import annotations

import csv
import os
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .augment import (
    AffineTransform,
    keypoint_mix,
    map_easy_to_hard,
    map_pose_easy_to_hard,
    sample_affine,
    warp_image,
)
from .datagen import DatasetSplit, Pose, Sample
from .heatmap import HeatmapStack, PckReport, decode, encode, pck
from .model import (
    AdamState,
    ArchConfig,
    GradientError,
    ParameterSet,
    apply_adam_step,
    apply_sgd_step,
    forward,
    forward_tensors,
    init_network,
    load_checkpoint,
    save_checkpoint,
    to_tensors,
)


class TrainingError(RuntimeError):
    """Raised for invalid training inputs or configuration."""


class TrainingAborted(TrainingError):
    """Raised when a step produces a non-finite loss; carries the last
    checkpoint path (if any) and a diagnostic report."""

    def __init__(self, message: str, checkpoint_path: str | None, report: "StepReport | None"):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
        self.report = report


MODES = ("semi", "supervised", "baseline")
OPTIMIZERS = ("adam", "sgd")
LEVELS = ("z", "p")

METRICS_COLUMNS = (
    "iteration",
    "loss_sup",
    "loss_un1",
    "loss_un2",
    "loss_total",
    "pck_g",
    "pck_f",
    "pck_mean",
    "pck_r1",
    "pck_r2",
    "wall_ms",
)


@dataclass(frozen=True)
class TrainingConfig:
    """Every scalar the protocol leaves open, with working defaults.

    lam weighs the supervised loss in the total; alpha and beta are the
    reviewer EMA momenta, eta the baseline-mode teacher momentum. levels
    may be given explicitly but must agree with use_mfl (levels is
    ("z",) exactly when use_mfl is off).
    """

    lam: float = 0.5
    alpha: float = 0.999
    beta: float = 0.999
    eta: float = 0.999
    k_mix: int = 5
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    max_iterations: int = 400
    levels: tuple[str, ...] | None = None
    use_mfl: bool = True
    use_km: bool = True
    use_reviewer: bool = True
    learning_rate: float = 0.001
    optimizer: str = "adam"
    lr_decay_fractions: tuple[float, ...] = (0.7, 0.9)
    lr_decay_factor: float = 0.1
    seed: int = 0
    sigma: float = 2.0
    val_fraction: float = 0.2
    eval_interval: int = 100
    pck_threshold: float = 0.2
    pck_reference: float | str = "head_bone"
    mode: str = "semi"
    easy_rotation: tuple[float, float] | None = None
    easy_scale: tuple[float, float] | None = None
    hard_rotation: tuple[float, float] | None = None
    hard_scale: tuple[float, float] | None = None
    patch_half: int | None = None
    torch_threads: int = 1

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise TrainingError(f"lam must be positive, got {self.lam}")
        for name in ("alpha", "beta", "eta"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise TrainingError(f"{name} must lie strictly inside (0, 1), got {value}")
        if self.k_mix < 0:
            raise TrainingError(f"k_mix must be >= 0, got {self.k_mix}")
        if self.batch_labeled < 1 or self.batch_unlabeled < 0:
            raise TrainingError("batch_labeled must be >= 1 and batch_unlabeled >= 0")
        if self.max_iterations < 0:
            raise TrainingError("max_iterations must be >= 0")
        if self.mode not in MODES:
            raise TrainingError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise TrainingError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0.0 <= self.val_fraction <= 0.9:
            raise TrainingError(f"val_fraction must lie in [0, 0.9], got {self.val_fraction}")
        if self.eval_interval < 1:
            raise TrainingError("eval_interval must be >= 1")
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if self.sigma <= 0:
            raise TrainingError("sigma must be positive")
        levels = self.levels
        if levels is None:
            levels = ("z", "p") if self.use_mfl else ("z",)
        levels = tuple(levels)
        if not levels or any(l not in LEVELS for l in levels) or len(set(levels)) != len(levels):
            raise TrainingError(f"levels must be a nonempty subset of {LEVELS}, got {levels}")
        if ("p" in levels) != self.use_mfl:
            raise TrainingError(
                f"levels {levels} conflict with use_mfl={self.use_mfl}; "
                "multi-level off means levels = ('z',)"
            )
        object.__setattr__(self, "levels", levels)

    def patch_half_px(self, stride: float) -> int:
        if self.patch_half is not None:
            return int(self.patch_half)
        return int(round(2.0 * self.sigma * stride))


@dataclass(frozen=True)
class NetworkEnsemble:
    """The four parameter sets plus the shared iteration counter."""

    g: ParameterSet
    f: ParameterSet
    r1: ParameterSet
    r2: ParameterSet
    iteration: int = 0

    def __post_init__(self) -> None:
        fps = {self.g.fingerprint, self.f.fingerprint, self.r1.fingerprint, self.r2.fingerprint}
        if len(fps) != 1:
            raise TrainingError("all four networks must share one structural fingerprint")

    def network(self, name: str) -> ParameterSet:
        if name not in ("g", "f", "r1", "r2"):
            raise TrainingError(f"unknown network {name!r}")
        return getattr(self, name)


def init_ensemble(seed: int, arch_config: ArchConfig | None = None) -> NetworkEnsemble:
    """Two independently initialized networks; reviewers start as exact copies."""
    arch = arch_config or ArchConfig()
    child = np.random.SeedSequence(int(seed)).generate_state(2)
    g = init_network(int(child[0]), arch)
    f = init_network(int(child[1]), arch)
    return NetworkEnsemble(g=g, f=f, r1=g, r2=f, iteration=0)


@dataclass(frozen=True)
class StepReport:
    """Losses and movement diagnostics for one training step."""

    iteration: int
    loss_sup: float
    loss_un1: float
    loss_un2: float
    loss_total: float
    delta_g: float = 0.0
    delta_f: float = 0.0
    delta_r1: float = 0.0
    delta_r2: float = 0.0
    r1_ema_gap: float = 0.0
    r2_ema_gap: float = 0.0
    terms: Mapping[str, float] | None = None


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    loss_sup: float
    loss_un1: float
    loss_un2: float
    loss_total: float
    pck_g: float
    pck_f: float
    pck_mean: float
    pck_r1: float
    pck_r2: float
    wall_ms: int


def ema_update(target: ParameterSet, source: ParameterSet, momentum: float) -> ParameterSet:
    """Element-wise momentum * target + (1 - momentum) * source."""
    if target.fingerprint != source.fingerprint:
        raise TrainingError("EMA requires matching fingerprints")
    if not 0.0 < momentum < 1.0:
        raise TrainingError(f"momentum must lie strictly inside (0, 1), got {momentum}")
    by_name = dict(source.arrays)
    return target.map(
        lambda n, a: (momentum * a.astype(np.float64) + (1.0 - momentum) * by_name[n].astype(np.float64)).astype(
            a.dtype
        )
    )


class _Streams:
    """Independent seeded draws for batch picking, view sampling, and mixing."""

    NAMES = ("labeled", "unlabeled", "easy", "hard", "km")

    def __init__(self, seed: int):
        children = np.random.SeedSequence(int(seed)).spawn(len(self.NAMES))
        for name, child in zip(self.NAMES, children):
            setattr(self, name, np.random.default_rng(child))

    def get_states(self) -> dict:
        return {name: getattr(self, name).bit_generator.state for name in self.NAMES}

    def set_states(self, states: Mapping[str, dict]) -> None:
        for name in self.NAMES:
            getattr(self, name).bit_generator.state = states[name]


@dataclass
class PreparedBatch:
    """All numeric inputs of one step, with teacher work already done.

    Consistency targets are plain arrays (detached by construction), so a
    loss rebuilt from this batch treats them as constants, matching the
    stop-gradient the protocol requires.
    """

    labeled_images: np.ndarray
    sup_targets: np.ndarray
    sup_mask: np.ndarray
    hard_images_1: np.ndarray | None = None
    hard_images_2: np.ndarray | None = None
    targets_un1: Mapping[str, np.ndarray] | None = None
    targets_un2: Mapping[str, np.ndarray] | None = None


def _encode_supervised(
    batch: Iterable[Sample], arch: ArchConfig, sigma: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = []
    targets = []
    masks = []
    for sample in batch:
        if sample.pose is None:
            raise TrainingError(f"labeled sample {sample.id} has no pose")
        images.append(np.asarray(sample.image, dtype=np.float32))
        stack = encode(sample.pose, sigma, arch.heatmap_resolution, arch.heatmap_stride)
        targets.append(stack.values)
        masks.append(sample.pose.visible.astype(np.float32))
    return np.stack(images), np.stack(targets), np.stack(masks)


@dataclass
class _ViewBatch:
    images_easy: np.ndarray
    images_hard: np.ndarray
    t_easy: list[AffineTransform]
    t_hard: list[AffineTransform]


def _build_views(batch: list[Sample], config: TrainingConfig, arch: ArchConfig, streams: _Streams) -> _ViewBatch:
    resolution = arch.image_size
    easy_images = []
    hard_images = []
    t_easy = []
    t_hard = []
    for sample in batch:
        te = sample_affine(streams.easy, "easy", resolution, config.easy_rotation, config.easy_scale)
        th = sample_affine(streams.hard, "hard", resolution, config.hard_rotation, config.hard_scale)
        easy_images.append(warp_image(sample.image, te))
        hard_images.append(warp_image(sample.image, th))
        t_easy.append(te)
        t_hard.append(th)
    return _ViewBatch(
        images_easy=np.stack(easy_images),
        images_hard=np.stack(hard_images),
        t_easy=t_easy,
        t_hard=t_hard,
    )


def _teacher_direction(
    teacher: ParameterSet,
    reviewer: ParameterSet | None,
    views: _ViewBatch,
    config: TrainingConfig,
    arch: ArchConfig,
    streams: _Streams,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Hard student inputs (keypoint-mixed when enabled) and mapped easy-view
    level-z targets for one consistency direction."""
    stride = float(arch.heatmap_stride)
    teacher_z = forward(teacher, views.images_easy).level_z
    target_sources = {"teacher": teacher_z}
    if reviewer is not None:
        target_sources["reviewer"] = forward(reviewer, views.images_easy).level_z

    count = views.images_easy.shape[0]
    targets: dict[str, np.ndarray] = {
        key: np.empty_like(source) for key, source in target_sources.items()
    }
    for i in range(count):
        for key, source in target_sources.items():
            mapped = map_easy_to_hard(
                HeatmapStack(values=source[i], stride=stride), views.t_easy[i], views.t_hard[i]
            )
            targets[key][i] = mapped.values

    hard_images = views.images_hard.copy()
    if config.use_km and config.k_mix >= 1:
        patch_half = config.patch_half_px(stride)
        for i in range(count):
            pose_easy = decode(HeatmapStack(values=teacher_z[i], stride=stride))
            pose_hard = map_pose_easy_to_hard(pose_easy, views.t_easy[i], views.t_hard[i], arch.image_size)
            k_eff = min(config.k_mix, int(pose_hard.visible.sum()))
            if k_eff >= 1:
                hard_images[i] = keypoint_mix(hard_images[i], pose_hard, k_eff, patch_half, streams.km)
    return hard_images, targets


def prepare_batch(
    ensemble: NetworkEnsemble,
    labeled_batch: list[Sample],
    unlabeled_batch: list[Sample],
    config: TrainingConfig,
    streams: _Streams | None = None,
) -> PreparedBatch:
    """Materialize every array one step needs: supervised targets, easy and
    hard views, teacher-decoded mixing, and mapped consistency targets."""
    if not labeled_batch:
        raise TrainingError("labeled batch must be nonempty")
    arch = ensemble.g.arch
    streams = streams or _Streams(config.seed)
    labeled_images, sup_targets, sup_mask = _encode_supervised(labeled_batch, arch, config.sigma)
    prepared = PreparedBatch(labeled_images=labeled_images, sup_targets=sup_targets, sup_mask=sup_mask)
    if not unlabeled_batch:
        return prepared

    views = _build_views(unlabeled_batch, config, arch, streams)
    reviewer_1 = ensemble.r1 if config.use_reviewer else None
    reviewer_2 = ensemble.r2 if config.use_reviewer else None
    # Direction 1: g teaches, f studies. Direction 2 mirrors it.
    hard_1, raw_targets_1 = _teacher_direction(ensemble.g, reviewer_1, views, config, arch, streams)
    hard_2, raw_targets_2 = _teacher_direction(ensemble.f, reviewer_2, views, config, arch, streams)
    targets_un1 = {"g": raw_targets_1["teacher"]}
    targets_un2 = {"f": raw_targets_2["teacher"]}
    if config.use_reviewer:
        targets_un1["r1"] = raw_targets_1["reviewer"]
        targets_un2["r2"] = raw_targets_2["reviewer"]
    prepared.hard_images_1 = hard_1
    prepared.hard_images_2 = hard_2
    prepared.targets_un1 = targets_un1
    prepared.targets_un2 = targets_un2
    return prepared


@dataclass
class LossParts:
    sup: torch.Tensor
    un1: torch.Tensor
    un2: torch.Tensor
    total: torch.Tensor
    terms: dict[str, float]


def _masked_sample_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    # Mean over elements of visible channels per sample, then sum over samples.
    se = (pred - target) ** 2
    numer = (se * mask[:, :, None, None]).sum(dim=(1, 2, 3))
    denom = mask.sum(dim=1) * pred.shape[2] * pred.shape[3]
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, numer / safe, torch.zeros_like(numer)).sum()


def _sample_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((pred - target) ** 2).mean(dim=(1, 2, 3)).sum()


def loss_parts(
    tensors: Mapping[str, Mapping[str, torch.Tensor]],
    prepared: PreparedBatch,
    config: TrainingConfig,
    arch: ArchConfig,
    dtype: torch.dtype = torch.float32,
) -> LossParts:
    """Build the supervised and consistency losses from prepared inputs.

    tensors maps network name to its parameter tensors; consistency targets
    come from prepared as constants, so gradients reach only each
    direction's student. The total is lam * sup + un1 + un2.
    """
    levels = config.levels or ("z", "p")
    terms: dict[str, float] = {}

    def level_outputs(net: str, images: np.ndarray) -> dict[str, torch.Tensor]:
        t = torch.tensor(images[:, None, :, :], dtype=dtype)
        z, p = forward_tensors(arch, tensors[net], t)
        return {"z": z, "p": p}

    zero = torch.zeros((), dtype=dtype)
    mask = torch.tensor(prepared.sup_mask, dtype=dtype)
    sup_target = torch.tensor(prepared.sup_targets, dtype=dtype)
    sup_nets = ("g", "f", "r1", "r2") if config.use_reviewer else ("g", "f")
    sup = zero
    for net in sup_nets:
        outputs = level_outputs(net, prepared.labeled_images)
        for level in levels:
            term = _masked_sample_mse(outputs[level], sup_target, mask)
            terms[f"sup:{net}:{level}"] = float(term.detach())
            sup = sup + term

    def consistency(student: str, hard_images: np.ndarray | None, targets: Mapping[str, np.ndarray] | None):
        if hard_images is None or not targets:
            return zero
        outputs = level_outputs(student, hard_images)
        loss = zero
        for target_net in sorted(targets.keys()):
            target_t = torch.tensor(targets[target_net], dtype=dtype)
            for level in levels:
                term = _sample_mse(outputs[level], target_t)
                terms[f"un{'1' if student == 'f' else '2'}:{target_net}:{level}"] = float(term.detach())
                loss = loss + term
        return loss

    un1 = consistency("f", prepared.hard_images_1, prepared.targets_un1)
    un2 = consistency("g", prepared.hard_images_2, prepared.targets_un2)
    total = config.lam * sup + un1 + un2
    return LossParts(sup=sup, un1=un1, un2=un2, total=total, terms=terms)


def supervised_loss(
    ensemble: NetworkEnsemble,
    batch: list[Sample],
    levels: tuple[str, ...] | None = None,
    config: TrainingConfig | None = None,
) -> float:
    """Supervised MSE summed over networks, enabled levels, and samples."""
    config = _with_levels(config or TrainingConfig(), levels)
    prepared = prepare_batch(ensemble, batch, [], config)
    tensors = _ensemble_tensors(ensemble, config, requires_grad=False)
    return float(loss_parts(tensors, prepared, config, ensemble.g.arch).sup)


def consistency_loss_1(
    ensemble: NetworkEnsemble,
    batch: list[Sample],
    views: PreparedBatch,
    levels: tuple[str, ...] | None = None,
    config: TrainingConfig | None = None,
) -> float:
    """Consistency loss of student f against mapped easy-view targets from
    g (and r1 when reviewers are on); targets are constants."""
    config = _with_levels(config or TrainingConfig(), levels)
    if views.hard_images_1 is None or views.targets_un1 is None:
        raise TrainingError("prepared batch is missing direction-1 views")
    tensors = _ensemble_tensors(ensemble, config, requires_grad=False)
    return float(loss_parts(tensors, views, config, ensemble.g.arch).un1)


def consistency_loss_2(
    ensemble: NetworkEnsemble,
    batch: list[Sample],
    views: PreparedBatch,
    levels: tuple[str, ...] | None = None,
    config: TrainingConfig | None = None,
) -> float:
    """Mirror of consistency_loss_1: student g against f (and r2) targets."""
    config = _with_levels(config or TrainingConfig(), levels)
    if views.hard_images_2 is None or views.targets_un2 is None:
        raise TrainingError("prepared batch is missing direction-2 views")
    tensors = _ensemble_tensors(ensemble, config, requires_grad=False)
    return float(loss_parts(tensors, views, config, ensemble.g.arch).un2)


def _with_levels(config: TrainingConfig, levels: tuple[str, ...] | None) -> TrainingConfig:
    if levels is None:
        return config
    return replace(config, levels=tuple(levels), use_mfl="p" in levels)


def _ensemble_tensors(
    ensemble: NetworkEnsemble, config: TrainingConfig, requires_grad: bool, dtype: torch.dtype = torch.float32
) -> dict[str, dict[str, torch.Tensor]]:
    nets = ("g", "f", "r1", "r2") if config.use_reviewer else ("g", "f")
    return {
        name: to_tensors(ensemble.network(name), dtype=dtype, requires_grad=requires_grad) for name in nets
    }


def _grad_slices(
    parts: LossParts, tensors: Mapping[str, Mapping[str, torch.Tensor]]
) -> dict[str, dict[str, np.ndarray]]:
    leaves = []
    index = []
    for net, named in tensors.items():
        for name, tensor in named.items():
            leaves.append(tensor)
            index.append((net, name))
    grads = torch.autograd.grad(parts.total, leaves, allow_unused=True)
    out: dict[str, dict[str, np.ndarray]] = {net: {} for net in tensors}
    for (net, name), grad in zip(index, grads):
        if grad is None:
            out[net][name] = np.zeros(tuple(tensors[net][name].shape), dtype=np.float32)
        else:
            out[net][name] = grad.detach().numpy().astype(np.float32, copy=True)
    return out


def _param_delta(before: ParameterSet, after: ParameterSet) -> float:
    total = 0.0
    after_by = dict(after.arrays)
    for name, arr in before.arrays:
        diff = after_by[name].astype(np.float64) - arr.astype(np.float64)
        total += float(np.sum(diff * diff))
    return float(np.sqrt(total))


def _apply_updates(
    ensemble: NetworkEnsemble,
    grads: Mapping[str, Mapping[str, np.ndarray]],
    config: TrainingConfig,
    learning_rate: float,
    opt_states: dict[str, AdamState] | None,
) -> NetworkEnsemble:
    updated: dict[str, ParameterSet] = {}
    for net in ("g", "f", "r1", "r2"):
        params = ensemble.network(net)
        if net not in grads:
            updated[net] = params
            continue
        if config.optimizer == "adam":
            if opt_states is None:
                raise TrainingError("adam optimizer needs carried state")
            state = opt_states.get(net) or AdamState.fresh(params)
            params, state = apply_adam_step(params, grads[net], state, learning_rate)
            opt_states[net] = state
        else:
            params = apply_sgd_step(params, grads[net], learning_rate)
        updated[net] = params
    return NetworkEnsemble(
        g=updated["g"], f=updated["f"], r1=updated["r1"], r2=updated["r2"], iteration=ensemble.iteration
    )


def train_step(
    ensemble: NetworkEnsemble,
    labeled_batch: list[Sample],
    unlabeled_batch: list[Sample],
    config: TrainingConfig,
    *,
    streams: _Streams | None = None,
    opt_states: dict[str, AdamState] | None = None,
    learning_rate: float | None = None,
) -> tuple[NetworkEnsemble, StepReport]:
    """One full update: losses from prepared views, simultaneous gradient
    steps for all four networks, then reviewer EMA blending.

    opt_states (for adam) is updated in place when provided so a caller can
    carry it across steps; a fresh state is used otherwise.
    """
    streams = streams or _Streams(config.seed)
    lr = config.learning_rate if learning_rate is None else learning_rate
    if config.optimizer == "adam" and opt_states is None:
        opt_states = {}
    prepared = prepare_batch(ensemble, labeled_batch, unlabeled_batch, config, streams)
    tensors = _ensemble_tensors(ensemble, config, requires_grad=True)
    parts = loss_parts(tensors, prepared, config, ensemble.g.arch)
    total = float(parts.total.detach())
    report_losses = {
        "loss_sup": float(parts.sup.detach()),
        "loss_un1": float(parts.un1.detach()),
        "loss_un2": float(parts.un2.detach()),
        "loss_total": total,
    }
    if not np.isfinite(total):
        raise GradientError(total)

    grads = _grad_slices(parts, tensors)
    stepped = _apply_updates(ensemble, grads, config, lr, opt_states)

    r1_gap = 0.0
    r2_gap = 0.0
    if config.use_reviewer:
        r1_post_ema = ema_update(stepped.r1, stepped.g, config.alpha)
        r2_post_ema = ema_update(stepped.r2, stepped.f, config.beta)
        r1_gap = _param_delta(stepped.r1, r1_post_ema)
        r2_gap = _param_delta(stepped.r2, r2_post_ema)
        stepped = replace(stepped, r1=r1_post_ema, r2=r2_post_ema)

    stepped = replace(stepped, iteration=ensemble.iteration + 1)
    report = StepReport(
        iteration=stepped.iteration,
        **report_losses,
        delta_g=_param_delta(ensemble.g, stepped.g),
        delta_f=_param_delta(ensemble.f, stepped.f),
        delta_r1=_param_delta(ensemble.r1, stepped.r1),
        delta_r2=_param_delta(ensemble.r2, stepped.r2),
        r1_ema_gap=r1_gap,
        r2_ema_gap=r2_gap,
        terms=parts.terms,
    )
    return stepped, report


def baseline_mean_teacher_step(
    teacher: ParameterSet,
    student: ParameterSet,
    labeled_batch: list[Sample],
    unlabeled_batch: list[Sample],
    config: TrainingConfig,
    *,
    streams: _Streams | None = None,
    opt_states: dict[str, AdamState] | None = None,
    learning_rate: float | None = None,
) -> tuple[ParameterSet, ParameterSet, StepReport]:
    """Classic single-student comparison path: the student descends the
    supervised plus consistency loss (teacher targets detached, level z
    only, no mixing), then the teacher blends toward the updated student
    with momentum eta."""
    if teacher.fingerprint != student.fingerprint:
        raise TrainingError("teacher and student must share a fingerprint")
    streams = streams or _Streams(config.seed)
    lr = config.learning_rate if learning_rate is None else learning_rate
    if config.optimizer == "adam" and opt_states is None:
        opt_states = {}
    baseline_cfg = replace(config, use_reviewer=False, use_km=False, use_mfl=False, levels=("z",))
    ensemble = NetworkEnsemble(g=teacher, f=student, r1=teacher, r2=student, iteration=0)
    prepared = prepare_batch(ensemble, labeled_batch, unlabeled_batch, baseline_cfg, streams)
    # Only the student is a leaf; the teacher's supervised term is dropped by
    # masking it out of the graph below.
    tensors = {"f": to_tensors(student, requires_grad=True)}

    arch = student.arch
    levels = ("z",)
    mask = torch.tensor(prepared.sup_mask)
    sup_target = torch.tensor(prepared.sup_targets)
    images_t = torch.tensor(prepared.labeled_images[:, None, :, :])
    z, _ = forward_tensors(arch, tensors["f"], images_t)
    sup = _masked_sample_mse(z, sup_target, mask)
    un = torch.zeros(())
    if prepared.hard_images_1 is not None and prepared.targets_un1:
        hard_t = torch.tensor(prepared.hard_images_1[:, None, :, :])
        z_hard, _ = forward_tensors(arch, tensors["f"], hard_t)
        un = _sample_mse(z_hard, torch.tensor(prepared.targets_un1["g"]))
    total = config.lam * sup + un
    total_val = float(total.detach())
    if not np.isfinite(total_val):
        raise GradientError(total_val)
    grads_list = torch.autograd.grad(total, list(tensors["f"].values()), allow_unused=True)
    grads = {
        name: (np.zeros(tuple(t.shape), dtype=np.float32) if g is None else g.numpy().astype(np.float32))
        for (name, t), g in zip(tensors["f"].items(), grads_list)
    }
    if config.optimizer == "adam":
        state = opt_states.get("student") or AdamState.fresh(student)
        student_next, state = apply_adam_step(student, grads, state, lr)
        opt_states["student"] = state
    else:
        student_next = apply_sgd_step(student, grads, lr)
    teacher_next = ema_update(teacher, student_next, config.eta)
    report = StepReport(
        iteration=0,
        loss_sup=float(sup.detach()),
        loss_un1=float(un.detach()),
        loss_un2=0.0,
        loss_total=total_val,
        delta_g=_param_delta(teacher, teacher_next),
        delta_f=_param_delta(student, student_next),
    )
    return teacher_next, student_next, report


def evaluate(
    ensemble: NetworkEnsemble,
    dataset: list[Sample],
    which: str = "mean_gf",
    threshold: float = 0.2,
    reference: float | str = "head_bone",
) -> PckReport:
    """PCK of decoded level-z predictions on labeled samples.

    which selects g, f, r1, r2, or mean_gf, the per-joint average of the g
    and f reports (both networks end close, so their mean is reported)."""
    if not dataset:
        raise TrainingError("evaluate needs a nonempty dataset")
    for sample in dataset:
        if sample.pose is None:
            raise TrainingError(f"sample {sample.id} has no ground-truth pose")
    if which == "mean_gf":
        report_g = evaluate(ensemble, dataset, "g", threshold, reference)
        report_f = evaluate(ensemble, dataset, "f", threshold, reference)
        per_joint = tuple(0.5 * (a + b) for a, b in zip(report_g.per_joint, report_f.per_joint))
        total = 0.5 * (report_g.total + report_f.total)
        return PckReport(
            per_joint=per_joint,
            visible_counts=report_g.visible_counts,
            total=total,
            threshold=report_g.threshold,
        )
    params = ensemble.network(which)
    images = np.stack([s.image for s in dataset])
    out = forward(params, images)
    predictions = [
        decode(HeatmapStack(values=out.level_z[i], stride=out.stride)) for i in range(len(dataset))
    ]
    ground_truth = [s.pose for s in dataset]
    return pck(predictions, ground_truth, threshold, reference)


def split_validation(labeled: tuple[Sample, ...], val_fraction: float) -> tuple[list[Sample], list[Sample]]:
    """Deterministic holdout: the last floor(val_fraction * N) labeled
    samples validate; when that floor is zero the whole list does both."""
    n_val = int(len(labeled) * val_fraction)
    if n_val == 0:
        return list(labeled), list(labeled)
    return list(labeled[:-n_val]), list(labeled[-n_val:])


def _format_metric(value: float) -> str:
    return f"{value:.8g}"


def metrics_row_values(row: MetricsRow) -> list[str]:
    return [
        str(row.iteration),
        _format_metric(row.loss_sup),
        _format_metric(row.loss_un1),
        _format_metric(row.loss_un2),
        _format_metric(row.loss_total),
        _format_metric(row.pck_g),
        _format_metric(row.pck_f),
        _format_metric(row.pck_mean),
        _format_metric(row.pck_r1),
        _format_metric(row.pck_r2),
        str(row.wall_ms),
    ]


def write_metrics_csv(rows: Iterable[MetricsRow], path: str, append: bool = False) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    mode = "a" if append and os.path.exists(path) else "w"
    with open(path, mode, newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow(metrics_row_values(row))
    return path


def _lr_at(iteration: int, config: TrainingConfig) -> float:
    # Step decay at fixed fractions of the run, mirroring epoch-milestone schedules.
    if config.max_iterations <= 0:
        return config.learning_rate
    fraction = iteration / config.max_iterations
    drops = sum(1 for milestone in config.lr_decay_fractions if fraction >= milestone)
    return config.learning_rate * (config.lr_decay_factor**drops)


@dataclass
class TrainResult:
    ensemble: NetworkEnsemble
    history: tuple[MetricsRow, ...]
    metrics_path: str | None
    checkpoint_path: str | None


def _rng_states_payload(streams: _Streams) -> dict:
    return streams.get_states()


def _opt_arrays(opt_states: dict[str, AdamState] | None) -> tuple[dict, dict]:
    """Flatten adam states into checkpoint array groups plus step counters."""
    if not opt_states:
        return {}, {}
    groups: dict[str, dict[str, np.ndarray]] = {}
    counters: dict[str, int] = {}
    for net, state in opt_states.items():
        groups[f"adam_m_{net}"] = dict(state.m)
        groups[f"adam_v_{net}"] = dict(state.v)
        counters[net] = state.t
    return groups, counters


def _restore_opt_states(checkpoint, networks: dict[str, ParameterSet]) -> dict[str, AdamState]:
    states: dict[str, AdamState] = {}
    counters = checkpoint.extra_meta.get("adam_t", {})
    for group, arrays in checkpoint.optimizer_arrays.items():
        if not group.startswith("adam_m_"):
            continue
        net = group[len("adam_m_") :]
        params = networks.get(net)
        if params is None:
            continue
        v_arrays = checkpoint.optimizer_arrays.get(f"adam_v_{net}", {})
        order = params.names()
        states[net] = AdamState(
            m=tuple((n, arrays[n]) for n in order),
            v=tuple((n, v_arrays[n]) for n in order),
            t=int(counters.get(net, 0)),
        )
    return states


def train(
    split: DatasetSplit,
    config: TrainingConfig,
    arch_config: ArchConfig | None = None,
    *,
    metrics_path: str | None = None,
    checkpoint_dir: str | None = None,
    checkpoint_interval: int = 0,
    resume_from: str | None = None,
    progress: Callable[[MetricsRow], None] | None = None,
) -> TrainResult:
    """Run the full training loop for config.max_iterations steps.

    Labeled and unlabeled batches cycle on independent seeded streams; a
    held-out slice of the labeled list is scored every eval_interval steps
    and at the end. Metrics rows append to metrics_path when given;
    checkpoints land in checkpoint_dir. On a non-finite loss the loop
    checkpoints and raises TrainingAborted.
    """
    if not split.labeled:
        raise TrainingError("training needs at least one labeled sample")
    torch.set_num_threads(max(1, config.torch_threads))
    arch = arch_config or ArchConfig()
    train_labeled, val_samples = split_validation(split.labeled, config.val_fraction)
    unlabeled = list(split.unlabeled) if config.mode == "semi" else []

    streams = _Streams(config.seed)
    opt_states: dict[str, AdamState] | None = {} if config.optimizer == "adam" else None
    start_iteration = 0
    if resume_from is not None:
        checkpoint = load_checkpoint(resume_from)
        networks = checkpoint.networks
        for net in ("g", "f", "r1", "r2"):
            if net not in networks:
                raise TrainingError(f"checkpoint {resume_from} is missing network {net!r}")
        ensemble = NetworkEnsemble(
            g=networks["g"], f=networks["f"], r1=networks["r1"], r2=networks["r2"],
            iteration=checkpoint.iteration,
        )
        if checkpoint.rng_states:
            streams.set_states(checkpoint.rng_states)
        if config.optimizer == "adam":
            opt_states = _restore_opt_states(checkpoint, networks)
        start_iteration = checkpoint.iteration
    else:
        ensemble = init_ensemble(config.seed, arch)

    def save(tag: str) -> str | None:
        if checkpoint_dir is None:
            return None
        groups, counters = _opt_arrays(opt_states)
        return save_checkpoint(
            os.path.join(checkpoint_dir, f"ckpt_{tag}.npz"),
            networks={"g": ensemble.g, "f": ensemble.f, "r1": ensemble.r1, "r2": ensemble.r2},
            iteration=ensemble.iteration,
            rng_states=_rng_states_payload(streams),
            optimizer_arrays=groups,
            extra_meta={"config": _config_meta(config), "adam_t": counters},
        )

    history: list[MetricsRow] = []
    last_wall = time.monotonic()
    last_checkpoint: str | None = None

    def batch_of(samples: list[Sample], rng: np.random.Generator, size: int) -> list[Sample]:
        if not samples or size < 1:
            return []
        take = min(size, len(samples))
        idx = rng.choice(len(samples), size=take, replace=False)
        return [samples[int(i)] for i in idx]

    for iteration in range(start_iteration, config.max_iterations):
        lr = _lr_at(iteration, config)
        labeled_batch = batch_of(train_labeled, streams.labeled, config.batch_labeled)
        unlabeled_batch = batch_of(unlabeled, streams.unlabeled, config.batch_unlabeled)
        try:
            if config.mode == "baseline":
                teacher, student, step_report = baseline_mean_teacher_step(
                    ensemble.r1, ensemble.g, labeled_batch, unlabeled_batch, config,
                    streams=streams, opt_states=opt_states, learning_rate=lr,
                )
                ensemble = replace(ensemble, g=student, r1=teacher, iteration=iteration + 1)
                step_report = replace(step_report, iteration=iteration + 1)
            else:
                ensemble, step_report = train_step(
                    ensemble, labeled_batch, unlabeled_batch, config,
                    streams=streams, opt_states=opt_states, learning_rate=lr,
                )
        except GradientError as e:
            path = save("abort")
            diagnostic = StepReport(
                iteration=iteration + 1, loss_sup=float("nan"), loss_un1=float("nan"),
                loss_un2=float("nan"), loss_total=e.value,
            )
            raise TrainingAborted(
                f"non-finite loss at iteration {iteration + 1}", path, diagnostic
            ) from e

        done = iteration + 1 == config.max_iterations
        if (iteration + 1) % config.eval_interval == 0 or done:
            now = time.monotonic()
            row = MetricsRow(
                iteration=iteration + 1,
                loss_sup=step_report.loss_sup,
                loss_un1=step_report.loss_un1,
                loss_un2=step_report.loss_un2,
                loss_total=step_report.loss_total,
                pck_g=evaluate(ensemble, val_samples, "g", config.pck_threshold, config.pck_reference).total,
                pck_f=evaluate(ensemble, val_samples, "f", config.pck_threshold, config.pck_reference).total,
                pck_mean=evaluate(ensemble, val_samples, "mean_gf", config.pck_threshold, config.pck_reference).total,
                pck_r1=evaluate(ensemble, val_samples, "r1", config.pck_threshold, config.pck_reference).total,
                pck_r2=evaluate(ensemble, val_samples, "r2", config.pck_threshold, config.pck_reference).total,
                wall_ms=int((now - last_wall) * 1000),
            )
            last_wall = now
            history.append(row)
            if metrics_path is not None:
                write_metrics_csv([row], metrics_path, append=iteration + 1 > config.eval_interval or start_iteration > 0)
            if progress is not None:
                progress(row)
        if checkpoint_dir and checkpoint_interval > 0 and (iteration + 1) % checkpoint_interval == 0 and not done:
            last_checkpoint = save(f"{iteration + 1:06d}")

    final_path = save("final")
    if final_path is not None:
        last_checkpoint = final_path
    return TrainResult(
        ensemble=ensemble,
        history=tuple(history),
        metrics_path=metrics_path,
        checkpoint_path=last_checkpoint,
    )


def _config_meta(config: TrainingConfig) -> dict:
    meta = asdict(config)
    meta["levels"] = list(config.levels or ())
    return meta
