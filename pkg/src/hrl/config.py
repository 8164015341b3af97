"""Strict run configuration (YAML or JSON) with a resolved-config echo."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .backbone import RESNET34_BLOCKS, BackboneConfig
from .fusion import ModelConfig, normalize_variant
from .preprocess import AffineRanges
from .synth import ClassEffect, PhantomConfig
from .train import TrainHyper, normalize_strategy


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EffectSection(_Strict):
    intensity_shift: float = 0.0
    shift_rois: list[int] = []
    texture_frequency: float = Field(0.0, ge=0)
    texture_amplitude: float = Field(0.0, ge=0)
    atrophy_fraction: float = Field(0.0, ge=0, lt=1)
    atrophy_rois: list[int] = []


class GeneratorSection(_Strict):
    extents: tuple[int, int, int] = (24, 28, 24)
    roi_count: int = Field(16, ge=2)
    effects: list[EffectSection] = Field(
        default_factory=lambda: [EffectSection(), EffectSection(intensity_shift=0.1, shift_rois=[1, 2, 3, 4])],
        min_length=2)
    subjects_per_class: int | list[int] = 100
    noise_std: float = Field(0.03, ge=0)
    roi_jitter: float = Field(0.0, ge=0)
    site_bias: float = 0.0
    split_expression: bool = False
    atlas_seed: int | None = None
    tissue_intensity: dict[Literal["gm", "wm", "csf"], float] = {"gm": 0.55, "wm": 0.85, "csf": 0.25}

    def phantom(self) -> PhantomConfig:
        d = self.model_dump()
        d["effects"] = [ClassEffect(**e) for e in d["effects"]]
        return PhantomConfig(**d)


class DataSection(_Strict):
    path: str | None = None
    generator: GeneratorSection | None = None
    mask_rois: list[int] | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if self.path is None and self.generator is None:
            self.generator = GeneratorSection()
        return self


class ModelSection(_Strict):
    base_channels: int = Field(64, ge=1)
    blocks_per_stage: tuple[int, int, int, int] = RESNET34_BLOCKS
    hidden: int = Field(128, ge=1)
    heads: int = Field(16, ge=1)
    mlp_dim: int = Field(512, ge=1)
    depth: int = Field(1, ge=1)
    variant: str = "full"

    @field_validator("variant")
    @classmethod
    def _variant(cls, v):
        return normalize_variant(v)

    def build(self, input_shape, feature_dim: int, num_classes: int) -> ModelConfig:
        return ModelConfig(
            backbone=BackboneConfig(self.base_channels, self.blocks_per_stage),
            input_shape=tuple(input_shape), feature_dim=feature_dim, hidden=self.hidden, heads=self.heads,
            mlp_dim=self.mlp_dim, depth=self.depth, num_classes=num_classes, variant=self.variant)


class AugmentSection(_Strict):
    rotation_degrees: float = Field(10.0, ge=0)
    scale: float = Field(0.1, ge=0)
    translation: float = Field(2.0, ge=0)


class TrainSection(_Strict):
    lr: float = Field(1e-4, gt=0)
    max_epochs: int = Field(300, ge=1)
    early_stop_train_acc: float = Field(0.9, ge=0, le=1)
    batch_size: int = Field(4, ge=1)
    strategy: str = "two_stage"
    stage1_max_epochs: int | None = Field(None, ge=1)
    augment: AugmentSection = AugmentSection()

    @field_validator("strategy")
    @classmethod
    def _strategy(cls, v):
        return normalize_strategy(v)

    def hyper(self, seed: int) -> TrainHyper:
        d = self.model_dump()
        d["augment"] = AffineRanges(**d["augment"])
        return TrainHyper(seed=seed, **d)


class EvalSection(_Strict):
    k: int = Field(5, ge=2)
    repeats: int = Field(5, ge=1)
    task: Literal["binary", "multi"] = "binary"
    variants: list[str] | None = None
    strategies: list[str] | None = None

    @field_validator("variants")
    @classmethod
    def _variants(cls, v):
        return None if v is None else [normalize_variant(x) for x in v]

    @field_validator("strategies")
    @classmethod
    def _strategies(cls, v):
        return None if v is None else [normalize_strategy(x) for x in v]


class ExportSection(_Strict):
    out: str = "runs"
    figures: bool = False


class RunConfig(_Strict):
    seed: int = 0
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    export: ExportSection = ExportSection()

    def variants(self) -> list[str]:
        return self.eval.variants or [self.model.variant]

    def strategies(self) -> list[str]:
        return self.eval.strategies or [self.train.strategy]


def load_config(path=None) -> RunConfig:
    """Parse a YAML/JSON document; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    doc = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return RunConfig.model_validate(doc or {})


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True, default_flow_style=False)


def write_resolved(config: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.yaml"
    path.write_text(dump_config(config))
    return path
