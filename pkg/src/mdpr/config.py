"""Run configuration: YAML loading, defaults and validation."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

OUTPUT_ROOT_ENV = "MDPR_OUTPUT_ROOT"

# Names of the head outputs that may be concatenated into an inference vector.
# Partition heads are expanded per configured partition count.
INFERENCE_GLOBAL_NAMES = ("f_hard_g5", "f_soft_g5", "f_soft_g4", "f_fusion")
TRAINING_ONLY_NAMES = ("bap5", "bap4")


class ConfigError(ValueError):
    """Raised when a configuration document is malformed or violates an invariant."""


@dataclass
class DatasetSpec:
    path: str = "synthetic"
    n_ids: int = 8
    images_per_id: int = 8
    eval_images_per_id: int = 4

    @property
    def is_synthetic(self) -> bool:
        return self.path == "synthetic"


@dataclass
class BackboneSpec:
    widths: tuple[int, ...] = (32, 64, 128, 256, 512)
    blocks: tuple[int, ...] = (1, 1, 1, 1, 1)
    strides: tuple[int, ...] = (2, 2, 2, 2, 1)

    @property
    def total_stride(self) -> int:
        out = 1
        for s in self.strides:
            out *= s
        return out


@dataclass
class LossConfig:
    gamma: float = 64.0
    m: float = 0.35
    rho: float = 0.05
    beta: float = 0.001
    # Which heads get circle/triplet supervision in addition to the globals.
    supervise_bap: bool = True
    # "post" attaches metric losses to BN outputs, "pre" to the GeM outputs.
    feature_stage: str = "post"


@dataclass
class OptimConfig:
    name: str = "adam"
    base_lr: float = 3.5e-4
    warmup_iters: int = 2000
    weight_decay: float = 0.0005
    momentum: float = 0.9
    epochs: int = 60


@dataclass
class SamplerConfig:
    P: int = 16
    S: int = 16


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_aspect: tuple[float, float] = (0.3, 3.33)
    patch_prob: float = 0.5
    patch_area: tuple[float, float] = (0.01, 0.5)
    patch_aspect: tuple[float, float] = (0.1, 10.0)


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    image_size: tuple[int, int] = (384, 192)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    embedding_size: int = 512
    attention_count: int = 2
    partition_count: int = 2
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    use_guidance: bool = True
    use_distillation: bool = True
    use_fusion: bool = True
    distill_feature_stage: str = "post"
    inference_features: tuple[str, ...] | None = None
    normalize_components: bool = False
    pretrained: str | None = None
    output_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self) -> None:
        validate(self)

    # convenient aliases matching the usual notation
    @property
    def M(self) -> int:
        return self.embedding_size

    @property
    def K(self) -> int:
        return self.attention_count

    @property
    def N(self) -> int:
        return self.partition_count

    def partition_names(self) -> list[str]:
        return [f"f_hard_p{i + 1}" for i in range(self.partition_count)]

    def usable_inference_names(self) -> list[str]:
        names = ["f_hard_g5", *self.partition_names(), "f_soft_g5", "f_soft_g4"]
        if self.use_fusion:
            names.append("f_fusion")
        return names

    def selected_inference_names(self) -> list[str]:
        if self.inference_features is None:
            return self.usable_inference_names()
        return list(self.inference_features)

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def replace(self, **changes: Any) -> "RunConfig":
        return from_dict(_deep_update(self.to_dict(), changes))


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _deep_update(base: dict, changes: dict) -> dict:
    out = dict(base)
    for key, value in changes.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], value)
        else:
            out[key] = value
    return out


_SECTIONS = {
    "dataset": DatasetSpec,
    "backbone": BackboneSpec,
    "loss": LossConfig,
    "optim": OptimConfig,
    "sampler": SamplerConfig,
    "augment": AugmentConfig,
}


def _build(cls: type, data: dict, where: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name in _SECTIONS and cls is RunConfig:
            kwargs[name] = _build(_SECTIONS[name], value or {}, name)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "config")


def load_config(path: str | os.PathLike) -> RunConfig:
    """Read a YAML document and return a validated :class:`RunConfig`.

    Missing keys take their defaults; unknown keys are rejected so that typos
    in ablation configs fail loudly.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with path.open() as fh:
        data = yaml.safe_load(fh)
    return from_dict(data)


def _require(cond: bool, field_name: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{field_name}: {message}")


def validate(cfg: RunConfig) -> None:
    _require(cfg.embedding_size > 0, "embedding size", "must be positive")
    _require(cfg.attention_count >= 1, "attention count", "must be >= 1")
    _require(cfg.partition_count >= 1, "partition count", "must be >= 1")
    _require(cfg.sampler.P >= 2, "sampler.P", "identities per batch must be >= 2")
    _require(cfg.sampler.S >= 2, "sampler.S", "images per identity must be >= 2")

    bb = cfg.backbone
    _require(len(bb.widths) == 5, "backbone.widths", "need exactly 5 stage widths")
    _require(len(bb.blocks) == 5, "backbone.blocks", "need exactly 5 block counts")
    _require(len(bb.strides) == 5, "backbone.strides", "need exactly 5 strides")
    _require(bb.strides[-1] == 1, "backbone.strides", "last stage stride must be 1")
    _require(all(s in (1, 2) for s in bb.strides), "backbone.strides", "strides must be 1 or 2")

    _require(len(cfg.image_size) == 2, "image size", "expected (height, width)")
    h, w = cfg.image_size
    stride = bb.total_stride
    _require(
        h % (stride * cfg.partition_count) == 0,
        "image size",
        f"height {h} not divisible by total stride {stride} x partitions {cfg.partition_count}",
    )
    _require(w % stride == 0, "image size", f"width {w} not divisible by total stride {stride}")

    lc = cfg.loss
    _require(lc.gamma > 0, "loss.gamma", "must be positive")
    _require(0 < lc.m < 1, "loss.m", "must lie in (0, 1)")
    _require(lc.rho >= 0, "loss.rho", "must be non-negative")
    _require(lc.beta >= 0, "loss.beta", "must be non-negative")
    _require(lc.feature_stage in ("pre", "post"), "loss.feature_stage", "must be 'pre' or 'post'")
    _require(
        cfg.distill_feature_stage in ("pre", "post"),
        "distill_feature_stage",
        "must be 'pre' or 'post'",
    )
    _require(cfg.optim.name in ("adam", "sgd"), "optim.name", "must be 'adam' or 'sgd'")
    _require(cfg.optim.base_lr > 0, "optim.base_lr", "must be positive")
    _require(cfg.optim.warmup_iters >= 0, "optim.warmup_iters", "must be non-negative")
    _require(cfg.optim.epochs >= 1, "optim.epochs", "must be >= 1")

    if cfg.inference_features is not None:
        usable = set(cfg.usable_inference_names())
        _require(len(cfg.inference_features) > 0, "inference features", "selection is empty")
        for name in cfg.inference_features:
            _require(name in usable, "inference features", f"{name!r} is not usable at inference")
