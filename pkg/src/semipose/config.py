"""Declarative run configuration: TOML sections with defaults, strict
unknown-key checking, and dotted flag overrides that win over the file."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any, Mapping

import tomli

from .model import ArchConfig, ModelError
from .trainer import TrainingConfig, TrainingError


class ConfigError(ValueError):
    """Raised for unknown keys, malformed values, or inconsistent settings."""


SECTIONS = ("data", "run", "train", "arch")

# TrainingConfig fields that hold tuples (TOML supplies lists).
_TRAIN_TUPLE_FIELDS = (
    "levels",
    "lr_decay_fractions",
    "easy_rotation",
    "easy_scale",
    "hard_rotation",
    "hard_scale",
)
_ARCH_TUPLE_FIELDS = ("channels", "image_size")


@dataclass(frozen=True)
class RunConfig:
    """Everything one training or evaluation run needs."""

    training: TrainingConfig
    arch: ArchConfig
    data_dir: str | None = None
    out_dir: str = "runs/latest"
    checkpoint_interval: int = 0


def _known_fields(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _reject_unknown(section: str, raw: Mapping[str, Any], known: set[str]) -> None:
    unknown = sorted(set(raw.keys()) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _tuplify(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(value)
    return value


def run_config_from_dict(raw: Mapping[str, Any]) -> RunConfig:
    """Build a RunConfig from nested sections; unknown keys are a hard error."""
    if not isinstance(raw, Mapping):
        raise ConfigError(f"config must be a table of sections, got {type(raw).__name__}")
    unknown_sections = sorted(set(raw.keys()) - set(SECTIONS))
    if unknown_sections:
        raise ConfigError(f"unknown section(s): {', '.join(unknown_sections)}")
    for section in SECTIONS:
        if section in raw and not isinstance(raw[section], Mapping):
            raise ConfigError(f"[{section}] must be a table")

    train_raw = dict(raw.get("train", {}))
    _reject_unknown("train", train_raw, _known_fields(TrainingConfig))
    for key in _TRAIN_TUPLE_FIELDS:
        if key in train_raw and train_raw[key] is not None:
            train_raw[key] = _tuplify(train_raw[key])
    try:
        training = TrainingConfig(**train_raw)
    except (TrainingError, TypeError) as e:
        raise ConfigError(f"invalid [train] settings: {e}") from e

    arch_raw = dict(raw.get("arch", {}))
    _reject_unknown("arch", arch_raw, _known_fields(ArchConfig))
    for key in _ARCH_TUPLE_FIELDS:
        if key in arch_raw:
            arch_raw[key] = _tuplify(arch_raw[key])
    if "heatmap_stride" not in arch_raw:
        # Small inputs need finer heatmaps: stride 2 up to 64 pixels, 4 beyond.
        image_size = arch_raw.get("image_size", ArchConfig().image_size)
        arch_raw["heatmap_stride"] = 2 if min(image_size) <= 64 else 4
    try:
        arch = ArchConfig(**arch_raw)
    except (ModelError, TypeError) as e:
        raise ConfigError(f"invalid [arch] settings: {e}") from e

    data_raw = dict(raw.get("data", {}))
    _reject_unknown("data", data_raw, {"dir"})
    run_raw = dict(raw.get("run", {}))
    _reject_unknown("run", run_raw, {"out_dir", "checkpoint_interval"})
    checkpoint_interval = run_raw.get("checkpoint_interval", 0)
    if not isinstance(checkpoint_interval, int) or checkpoint_interval < 0:
        raise ConfigError("run.checkpoint_interval must be a non-negative integer")
    return RunConfig(
        training=training,
        arch=arch,
        data_dir=data_raw.get("dir"),
        out_dir=run_raw.get("out_dir", "runs/latest"),
        checkpoint_interval=checkpoint_interval,
    )


def run_config_to_dict(config: RunConfig) -> dict:
    """Echo a RunConfig as the same nested sections from_dict accepts."""

    def listify(value: Any) -> Any:
        if isinstance(value, tuple):
            return list(value)
        return value

    train = {k: listify(v) for k, v in asdict(config.training).items() if v is not None}
    arch = {k: listify(v) for k, v in asdict(config.arch).items()}
    out: dict[str, Any] = {
        "run": {"out_dir": config.out_dir, "checkpoint_interval": config.checkpoint_interval},
        "train": train,
        "arch": arch,
    }
    if config.data_dir is not None:
        out["data"] = {"dir": config.data_dir}
    return out


def apply_overrides(raw: dict, overrides: Mapping[str, Any]) -> dict:
    """Set dotted section.key overrides into a nested config dict (in a copy)."""
    result = {section: dict(table) for section, table in raw.items()}
    for dotted, value in overrides.items():
        if value is None:
            continue
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must be section.key")
        section, key = dotted.split(".", 1)
        result.setdefault(section, {})[key] = value
    return result


def load_run_config(path: str | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Parse a TOML config file (all sections optional) and apply overrides."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                raw = tomli.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"config file {path} is not valid TOML: {e}")
    if overrides:
        raw = apply_overrides(raw, overrides)
    return run_config_from_dict(raw)
