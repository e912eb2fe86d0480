"""Functional convolutional keypoint network with two heatmap heads.

Parameters live in immutable ParameterSets (named numpy arrays plus a
structural fingerprint); forward passes and gradients run through torch
on CPU. The backbone is a stack of (conv 3x3, tanh, 2x average pool)
stages; one head reads the final stage, the other the penultimate stage,
and both upsample to a common heatmap resolution with a sigmoid output
so every confidence lies in [0, 1]. tanh and average pooling keep the
loss surface smooth, which finite-difference checks rely on.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F


class ModelError(ValueError):
    """Raised for architecture or shape mismatches."""


class GradientError(RuntimeError):
    """Raised when a loss evaluates non-finite; carries the offending value."""

    def __init__(self, value: float):
        super().__init__(f"loss is non-finite: {value}")
        self.value = value


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoint files."""


CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Backbone and head shape of the network."""

    stages: int = 4
    channels: tuple[int, ...] = (8, 16, 32, 32)
    joints: int = 7
    image_size: tuple[int, int] = (64, 64)
    heatmap_stride: int = 2
    head_hidden: int = 16

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if self.stages < 2:
            raise ModelError("multi-level supervision needs at least 2 stages")
        if len(self.channels) != self.stages:
            raise ModelError(f"expected {self.stages} channel counts, got {len(self.channels)}")
        if any(c < 1 for c in self.channels):
            raise ModelError("channel counts must be positive")
        height, width = self.image_size
        factor = 2**self.stages
        if height % factor or width % factor:
            raise ModelError(f"image size {self.image_size} must be divisible by 2^stages = {factor}")
        if height % self.heatmap_stride or width % self.heatmap_stride:
            raise ModelError(f"image size {self.image_size} must be divisible by stride {self.heatmap_stride}")

    @property
    def heatmap_resolution(self) -> tuple[int, int]:
        return (self.image_size[0] // self.heatmap_stride, self.image_size[1] // self.heatmap_stride)


def _layer_shapes(arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    in_ch = 1
    for i, out_ch in enumerate(arch.channels):
        shapes.append((f"stage{i}.weight", (out_ch, in_ch, 3, 3)))
        shapes.append((f"stage{i}.bias", (out_ch,)))
        in_ch = out_ch
    for level, feat_ch in (("z", arch.channels[-1]), ("p", arch.channels[-2])):
        shapes.append((f"head_{level}.conv1.weight", (arch.head_hidden, feat_ch, 3, 3)))
        shapes.append((f"head_{level}.conv1.bias", (arch.head_hidden,)))
        shapes.append((f"head_{level}.conv2.weight", (arch.joints, arch.head_hidden, 3, 3)))
        shapes.append((f"head_{level}.conv2.bias", (arch.joints,)))
    return shapes


def structural_fingerprint(shapes: list[tuple[str, tuple[int, ...]]]) -> str:
    payload = json.dumps([[name, list(shape)] for name, shape in shapes]).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True)
class ParameterSet:
    """Named, ordered parameter arrays; immutable, compared by fingerprint.

    Arrays are float32 by default; float64 is preserved so numerically
    tight harness work can run the same code path at higher precision.
    """

    arch: ArchConfig
    arrays: tuple[tuple[str, np.ndarray], ...]
    fingerprint: str

    def __post_init__(self) -> None:
        frozen = []
        for name, arr in self.arrays:
            arr = np.asarray(arr)
            if arr.dtype != np.float64:
                arr = arr.astype(np.float32)
            else:
                arr = arr.copy()
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"parameter {name} contains non-finite values")
            arr.setflags(write=False)
            frozen.append((name, arr))
        object.__setattr__(self, "arrays", tuple(frozen))
        expected = structural_fingerprint([(n, tuple(a.shape)) for n, a in frozen])
        if expected != self.fingerprint:
            raise ModelError("fingerprint does not match array shapes")

    def __getitem__(self, name: str) -> np.ndarray:
        for n, arr in self.arrays:
            if n == name:
                return arr
        raise KeyError(name)

    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.arrays)

    @property
    def num_params(self) -> int:
        return int(sum(a.size for _, a in self.arrays))

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ParameterSet":
        return ParameterSet(
            arch=self.arch,
            arrays=tuple((n, fn(n, a)) for n, a in self.arrays),
            fingerprint=self.fingerprint,
        )


def make_parameter_set(arch: ArchConfig, arrays: Mapping[str, np.ndarray]) -> ParameterSet:
    shapes = _layer_shapes(arch)
    missing = [n for n, _ in shapes if n not in arrays]
    if missing:
        raise ModelError(f"missing parameter arrays: {missing}")
    ordered = tuple((n, np.asarray(arrays[n])) for n, _ in shapes)
    for (name, shape), (_, arr) in zip(shapes, ordered):
        if tuple(arr.shape) != shape:
            raise ModelError(f"parameter {name} has shape {arr.shape}, expected {shape}")
    return ParameterSet(arch=arch, arrays=ordered, fingerprint=structural_fingerprint([(n, s) for n, s in shapes]))


def init_network(seed: int, arch_config: ArchConfig | None = None) -> ParameterSet:
    """Fan-in scaled uniform initialization, deterministic in the seed."""
    arch = arch_config or ArchConfig()
    rng = np.random.default_rng(int(seed))
    arrays: dict[str, np.ndarray] = {}
    for name, shape in _layer_shapes(arch):
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return make_parameter_set(arch, arrays)


def to_tensors(
    params: ParameterSet, dtype: torch.dtype = torch.float32, requires_grad: bool = False
) -> dict[str, torch.Tensor]:
    return {
        name: torch.tensor(np.asarray(arr), dtype=dtype, requires_grad=requires_grad)
        for name, arr in params.arrays
    }


def forward_tensors(
    arch: ArchConfig, tensors: Mapping[str, torch.Tensor], images: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Torch forward pass over a (N, 1, H, W) batch; returns (level_z, level_p)
    heatmap batches of shape (N, J, H_h, W_h)."""
    if images.ndim != 4 or images.shape[1] != 1:
        raise ModelError(f"expected images of shape (N, 1, H, W), got {tuple(images.shape)}")
    if tuple(images.shape[2:]) != arch.image_size:
        raise ModelError(f"image size {tuple(images.shape[2:])} does not match configured {arch.image_size}")
    x = images
    features = []
    for i in range(arch.stages):
        x = F.conv2d(x, tensors[f"stage{i}.weight"], tensors[f"stage{i}.bias"], padding=1)
        x = torch.tanh(x)
        x = F.avg_pool2d(x, 2)
        features.append(x)

    def head(level: str, feat: torch.Tensor) -> torch.Tensor:
        h = F.conv2d(feat, tensors[f"head_{level}.conv1.weight"], tensors[f"head_{level}.conv1.bias"], padding=1)
        h = torch.tanh(h)
        h = F.interpolate(h, size=arch.heatmap_resolution, mode="bilinear", align_corners=False)
        h = F.conv2d(h, tensors[f"head_{level}.conv2.weight"], tensors[f"head_{level}.conv2.bias"], padding=1)
        return torch.sigmoid(h)

    return head("z", features[-1]), head("p", features[-2])


@dataclass(frozen=True)
class MultiLevelOutput:
    """Heatmap batches from the final (z) and penultimate (p) stages."""

    level_z: np.ndarray
    level_p: np.ndarray
    stride: float


def _as_batch(images: np.ndarray) -> tuple[np.ndarray, bool]:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 2:
        return images[None, :, :], True
    if images.ndim == 3:
        return images, False
    raise ModelError(f"expected (H, W) or (N, H, W) images, got shape {images.shape}")


def forward(params: ParameterSet, images: np.ndarray) -> MultiLevelOutput:
    """Numpy-in, numpy-out forward pass (no gradients)."""
    batch, _ = _as_batch(images)
    with torch.no_grad():
        t = torch.from_numpy(batch[:, None, :, :])
        z, p = forward_tensors(params.arch, to_tensors(params), t)
    return MultiLevelOutput(
        level_z=z.numpy(), level_p=p.numpy(), stride=float(params.arch.heatmap_stride)
    )


def loss_gradient(
    params: ParameterSet,
    loss_closure: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    dtype: torch.dtype = torch.float32,
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate a scalar loss built from differentiable forward passes over
    params and return exact reverse-mode gradients per parameter.

    Parameters the loss never touches (detached targets, unused heads) get
    explicit zero gradients.
    """
    tensors = to_tensors(params, dtype=dtype, requires_grad=True)
    loss = loss_closure(tensors)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise GradientError(value)
    names = list(tensors.keys())
    grads = torch.autograd.grad(loss, [tensors[n] for n in names], allow_unused=True)
    out: dict[str, np.ndarray] = {}
    for name, grad in zip(names, grads):
        if grad is None:
            out[name] = np.zeros(tensors[name].shape, dtype=np.float64 if dtype == torch.float64 else np.float32)
        else:
            out[name] = grad.detach().numpy().copy()
    return value, out


def _check_grads(params: ParameterSet, grads: Mapping[str, np.ndarray]) -> None:
    for name, arr in params.arrays:
        if name not in grads:
            raise ModelError(f"missing gradient for {name}")
        if tuple(np.asarray(grads[name]).shape) != tuple(arr.shape):
            raise ModelError(
                f"gradient {name} has shape {np.asarray(grads[name]).shape}, expected {arr.shape}"
            )


def apply_sgd_step(
    params: ParameterSet, grads: Mapping[str, np.ndarray], learning_rate: float
) -> ParameterSet:
    """Plain descent step: params - learning_rate * grads."""
    _check_grads(params, grads)
    return params.map(
        lambda n, a: (a.astype(np.float64) - learning_rate * np.asarray(grads[n], dtype=np.float64)).astype(
            a.dtype
        )
    )


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators and the step counter."""

    m: tuple[tuple[str, np.ndarray], ...]
    v: tuple[tuple[str, np.ndarray], ...]
    t: int

    @staticmethod
    def fresh(params: ParameterSet) -> "AdamState":
        zeros = tuple((n, np.zeros_like(a)) for n, a in params.arrays)
        return AdamState(m=zeros, v=zeros, t=0)


def apply_adam_step(
    params: ParameterSet,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParameterSet, AdamState]:
    """Bias-corrected adaptive-moment step."""
    _check_grads(params, grads)
    t = state.t + 1
    m_by = dict(state.m)
    v_by = dict(state.v)
    new_m = []
    new_v = []
    new_arrays: dict[str, np.ndarray] = {}
    for name, arr in params.arrays:
        g = np.asarray(grads[name], dtype=np.float64)
        m = beta1 * m_by[name].astype(np.float64) + (1.0 - beta1) * g
        v = beta2 * v_by[name].astype(np.float64) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_arrays[name] = (arr.astype(np.float64) - learning_rate * m_hat / (np.sqrt(v_hat) + eps)).astype(
            arr.dtype
        )
        new_m.append((name, m.astype(np.float32)))
        new_v.append((name, v.astype(np.float32)))
    return make_parameter_set(params.arch, new_arrays), AdamState(m=tuple(new_m), v=tuple(new_v), t=t)


@dataclass(frozen=True)
class Checkpoint:
    """Loaded checkpoint contents."""

    networks: dict[str, ParameterSet]
    iteration: int
    rng_states: dict | None
    optimizer_arrays: dict[str, dict[str, np.ndarray]]
    extra_meta: dict
    version: int
    fingerprint: str


def save_checkpoint(
    path: str,
    *,
    networks: Mapping[str, ParameterSet],
    iteration: int,
    rng_states: dict | None = None,
    optimizer_arrays: Mapping[str, Mapping[str, np.ndarray]] | None = None,
    extra_meta: dict | None = None,
) -> str:
    """Write a self-describing container: JSON metadata plus named
    little-endian float32 arrays."""
    if not networks:
        raise CheckpointError("checkpoint needs at least one network")
    first = next(iter(networks.values()))
    for name, ps in networks.items():
        if ps.fingerprint != first.fingerprint:
            raise CheckpointError(f"network {name} has a mismatched fingerprint")
    meta = {
        "format": "semipose-checkpoint",
        "version": CHECKPOINT_VERSION,
        "iteration": int(iteration),
        "arch": asdict(first.arch),
        "fingerprint": first.fingerprint,
        "networks": sorted(networks.keys()),
        "param_names": list(first.names()),
        "optimizer_groups": sorted(optimizer_arrays.keys()) if optimizer_arrays else [],
        "rng_states": rng_states,
        "extra": extra_meta or {},
    }
    payload: dict[str, np.ndarray] = {
        "__meta__": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    }
    for net_name, ps in networks.items():
        for name, arr in ps.arrays:
            payload[f"net/{net_name}/{name}"] = arr.astype("<f4")
    if optimizer_arrays:
        for group, arrays in optimizer_arrays.items():
            for name, arr in arrays.items():
                payload[f"opt/{group}/{name}"] = np.asarray(arr).astype("<f4")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        np.savez(f, **payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise CheckpointError(f"{path} is not a checkpoint (missing metadata)")
        meta = json.loads(bytes(data["__meta__"].tolist()).decode("utf-8"))
        if meta.get("format") != "semipose-checkpoint":
            raise CheckpointError(f"{path} has unknown format {meta.get('format')!r}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")
        arch_dict = dict(meta["arch"])
        arch = ArchConfig(
            stages=arch_dict["stages"],
            channels=tuple(arch_dict["channels"]),
            joints=arch_dict["joints"],
            image_size=tuple(arch_dict["image_size"]),
            heatmap_stride=arch_dict["heatmap_stride"],
            head_hidden=arch_dict["head_hidden"],
        )
        networks: dict[str, ParameterSet] = {}
        for net_name in meta["networks"]:
            arrays = {name: data[f"net/{net_name}/{name}"] for name in meta["param_names"]}
            ps = make_parameter_set(arch, arrays)
            if ps.fingerprint != meta["fingerprint"]:
                raise CheckpointError(f"network {net_name} does not match the stored fingerprint")
            networks[net_name] = ps
        optimizer_arrays: dict[str, dict[str, np.ndarray]] = {}
        for group in meta.get("optimizer_groups", []):
            prefix = f"opt/{group}/"
            optimizer_arrays[group] = {
                key[len(prefix) :]: data[key].copy() for key in data.files if key.startswith(prefix)
            }
    return Checkpoint(
        networks=networks,
        iteration=int(meta["iteration"]),
        rng_states=meta.get("rng_states"),
        optimizer_arrays=optimizer_arrays,
        extra_meta=meta.get("extra", {}),
        version=int(meta["version"]),
        fingerprint=meta["fingerprint"],
    )
