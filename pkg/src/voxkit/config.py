"""Experiment configuration: one JSON file, five sections plus ``infer``."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .losses import LossConfig
from .models import ModelConfig
from .sampling import SamplerConfig
from .training import TrainHyper


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    normalization: dict = field(default_factory=lambda: {"method": "zscore", "clip": None})


@dataclass
class InferConfig:
    stride: Optional[int] = None


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    infer: InferConfig = field(default_factory=InferConfig)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {s: asdict(getattr(self, s)) for s in SECTIONS}
        return d

    def resolve(self, p: Optional[str]) -> Optional[Path]:
        if p is None or p == "":
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "sampler": SamplerConfig,
    "loss": LossConfig,
    "train": TrainHyper,
    "infer": InferConfig,
}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form a.b=value")
        path, value = item.split("=", 1)
        keys = path.strip().split(".")
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {path!r} descends into a non-object")
        node[keys[-1]] = _parse_value(value)
    return raw


def build_config(raw: dict, base_dir=".") -> ExperimentConfig:
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    parts = {}
    for name, cls in SECTIONS.items():
        section = raw.get(name, {}) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        known = {f.name for f in fields(cls)}
        extra = set(section) - known
        if extra:
            raise ConfigError(f"unknown field(s) in {name}: {', '.join(f'{name}.{e}' for e in sorted(extra))}")
        try:
            parts[name] = cls(**section)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid {name} section: {e}") from e
    cfg = ExperimentConfig(**parts, base_dir=Path(base_dir))
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    div = cfg.model.divisor
    if cfg.sampler.patch_size % div:
        raise ConfigError(
            f"model.num_scales={cfg.model.num_scales} needs sampler.patch_size divisible by {div}, "
            f"got {cfg.sampler.patch_size}"
        )
    s = cfg.infer.stride
    if s is not None and not 1 <= s <= cfg.sampler.patch_size:
        raise ConfigError(f"infer.stride must lie in [1, {cfg.sampler.patch_size}]")


def load_config(path, overrides=None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return build_config(apply_overrides(raw, overrides), path.parent)
