"""Run configuration: one strict JSON document shared by every subcommand."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .contrastive import NoiseSpec
from .dataio import AugmentConfig, SynthSpec
from .encoder import EncoderConfig
from .fewshot import ClassifierConfig, SegConfig
from .pretrain import PretrainConfig


class ConfigError(ValueError):
    """Validation failure; ``path`` is the offending JSON location, e.g. ``pretrain.lr_milestones[1]``."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DataSection(_Strict):
    path: str = "data"
    n_classes: int = Field(3, ge=2)
    n_per_class: int = Field(200, ge=1)
    channels: Literal[3, 4] = 4
    size: int = Field(32, ge=8)
    task: Literal["classification", "segmentation"] = "classification"


class EncoderSection(_Strict):
    in_channels: Literal[3, 4] = 4
    stage_widths: list[int] = Field(default_factory=lambda: [16, 32, 64, 128], min_length=1)
    blocks_per_stage: int = Field(1, ge=1)
    projection_dim: int = Field(128, ge=1)


class NoiseSection(_Strict):
    dim: int = Field(128, ge=1)
    mean: float = 0.0
    variance: float = Field(0.1, gt=0)


class GencoSection(_Strict):
    bank_capacity: int = Field(512, ge=1)
    tau: float = Field(0.2, gt=0)
    momentum: float = Field(0.999, gt=0, le=1)
    symmetric_negatives: bool = False
    no_generator: bool = False
    noise: NoiseSection = Field(default_factory=NoiseSection)


class AugmentSection(_Strict):
    crop_scale_range: tuple[float, float] = (0.4, 1.0)
    flip_prob: float = Field(0.5, ge=0, le=1)
    jitter_prob: float = Field(0.8, ge=0, le=1)
    brightness: float = Field(0.4, ge=0)
    contrast: float = Field(0.4, ge=0)
    saturation: float = Field(0.4, ge=0)
    grayscale_prob: float = Field(0.2, ge=0, le=1)
    rotation_choices: list[Literal[0, 90, 180, 270]] = Field(default_factory=lambda: [0, 90, 180, 270],
                                                             min_length=1)
    output_size: int = Field(32, ge=1)


class PretrainSection(_Strict):
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(32, ge=1)
    base_lr: float = Field(0.3, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    sgd_momentum: float = Field(0.9, ge=0, lt=1)
    lr_milestones: list[tuple[int, float]] = Field(default_factory=lambda: [(21, 0.03), (24, 0.003)])
    bn_splits: int = Field(4, ge=1)
    checkpoint_every: int = Field(10, ge=0)
    augment: AugmentSection = Field(default_factory=AugmentSection)


class ClassifierSection(_Strict):
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    optimizer: Literal["sgd-momentum", "adam", "adamw"] = "adam"
    weight_decay: float = Field(0.0, ge=0)
    enrich: bool = True
    train_generator: bool = True
    freeze_enriched_set: bool = False


class SegmentationSection(_Strict):
    epochs: int = Field(20, ge=1)
    steps_per_epoch: int = Field(50, ge=1)
    batch_size: int = Field(10, ge=1)
    lr: float = Field(3e-3, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    pct_start: float = Field(0.3, gt=0, lt=1)
    enrich: bool = True
    query_size: int = Field(20, ge=0)


class FewshotSection(_Strict):
    n_way: int = Field(3, ge=2)
    k_shot: int = Field(10, ge=1)
    trials: int = Field(3, ge=1)
    query_per_class: int = Field(15, ge=1)
    ablation_shots: list[int] = Field(default_factory=lambda: [10, 5, 1], min_length=1)
    classifier: ClassifierSection = Field(default_factory=ClassifierSection)
    segmentation: SegmentationSection = Field(default_factory=SegmentationSection)


class OutputSection(_Strict):
    dir: str = "runs"


class RunConfig(_Strict):
    seed: int = Field(0, ge=0)
    data: DataSection = Field(default_factory=DataSection)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    genco: GencoSection = Field(default_factory=GencoSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    fewshot: FewshotSection = Field(default_factory=FewshotSection)
    output: OutputSection = Field(default_factory=OutputSection)

    # -- conversions into the library's own config objects

    def synth_spec(self) -> SynthSpec:
        from .numcore import derive_seed
        d = self.data
        return SynthSpec(n_classes=d.n_classes, n_per_class=d.n_per_class, channels=d.channels,
                         size=d.size, seed=derive_seed(self.seed, "data"), task=d.task)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**self.encoder.model_dump())

    def pretrain_config(self, dataset: str | None = None, **overrides) -> PretrainConfig:
        p, g = self.pretrain, self.genco
        aug = p.augment.model_dump()
        aug["crop_scale_range"] = tuple(aug["crop_scale_range"])
        aug["rotation_choices"] = tuple(aug["rotation_choices"])
        kw = dict(dataset=dataset or self.data.path, encoder=self.encoder_config(),
                  augment=AugmentConfig(**aug), noise=NoiseSpec(**g.noise.model_dump()),
                  bank_capacity=g.bank_capacity, tau=g.tau, momentum=g.momentum,
                  symmetric_negatives=g.symmetric_negatives, no_generator=g.no_generator,
                  epochs=p.epochs, batch_size=p.batch_size, base_lr=p.base_lr,
                  weight_decay=p.weight_decay, sgd_momentum=p.sgd_momentum,
                  lr_milestones=[tuple(m) for m in p.lr_milestones], bn_splits=p.bn_splits,
                  checkpoint_every=p.checkpoint_every, seed=self.seed)
        kw.update(overrides)
        return PretrainConfig(**kw)

    def classifier_config(self, **overrides) -> ClassifierConfig:
        return ClassifierConfig(**{**self.fewshot.classifier.model_dump(), **overrides})

    def seg_config(self, **overrides) -> SegConfig:
        return SegConfig(**{**self.fewshot.segmentation.model_dump(), **overrides})

    def resolved(self) -> dict:
        return self.model_dump(mode="json")


def _loc_to_path(loc) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += ("." if out else "") + str(part)
    return out or "<root>"


def _cross_checks(cfg: RunConfig) -> None:
    prev = -1
    for i, (epoch, lr) in enumerate(cfg.pretrain.lr_milestones):
        if epoch <= prev:
            raise ConfigError(f"pretrain.lr_milestones[{i}]", "milestone epochs must be strictly increasing")
        if lr <= 0:
            raise ConfigError(f"pretrain.lr_milestones[{i}]", "milestone learning rates must be positive")
        prev = epoch
    lo, hi = cfg.pretrain.augment.crop_scale_range
    if not 0 < lo <= hi <= 1:
        raise ConfigError("pretrain.augment.crop_scale_range", "need 0 < min <= max <= 1")
    if cfg.pretrain.batch_size % cfg.pretrain.bn_splits:
        raise ConfigError("pretrain.bn_splits", f"must divide batch_size {cfg.pretrain.batch_size}")
    if cfg.pretrain.batch_size > cfg.genco.bank_capacity:
        raise ConfigError("genco.bank_capacity", f"smaller than batch_size {cfg.pretrain.batch_size}")
    if cfg.encoder.in_channels != cfg.data.channels:
        raise ConfigError("encoder.in_channels", f"does not match data.channels {cfg.data.channels}")
    if cfg.pretrain.augment.output_size > cfg.data.size:
        raise ConfigError("pretrain.augment.output_size", f"exceeds data.size {cfg.data.size}")
    if any(k < 1 for k in cfg.fewshot.ablation_shots):
        raise ConfigError("fewshot.ablation_shots", "shots must be positive")
    seg = cfg.data.task == "segmentation"
    if seg and cfg.fewshot.segmentation.enrich and cfg.encoder.stage_widths[-1] != cfg.encoder.projection_dim:
        # the generator perturbs the pooled bottleneck, so it must live in that width
        raise ConfigError("encoder.projection_dim", f"segmentation enrichment needs projection_dim equal to "
                                                    f"the last stage width {cfg.encoder.stage_widths[-1]}")
    if seg and len(cfg.encoder.stage_widths) != 4:
        raise ConfigError("encoder.stage_widths", "the segmentation decoder needs exactly four stages")


def parse_config(raw: dict, seed: int | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(_loc_to_path(err["loc"]), err["msg"]) from None
    if seed is not None:
        if seed < 0:
            raise ConfigError("seed", "must be non-negative")
        cfg.seed = seed
    _cross_checks(cfg)
    return cfg


def load_config(path=None, seed: int | None = None) -> RunConfig:
    """Read and validate a config file; ``None`` gives the defaults."""
    if path is None:
        return parse_config({}, seed)
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("<root>", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(raw, seed)
