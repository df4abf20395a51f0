"""Experiment configuration: one validated document per run.

Configs are read from TOML or JSON. No environment-variable interpolation
is performed. The config hash is the SHA-256 of the canonical JSON dump.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SeriesTransformConfig(_Strict):
    gain: float = 1.0
    bias: float = 0.0
    nonlinearity: Literal["identity", "tanh", "square", "softplus"] = "identity"
    noise: float = Field(0.05, ge=0.0)


def _default_series() -> list[SeriesTransformConfig]:
    return [
        SeriesTransformConfig(gain=1.0, bias=0.0, nonlinearity="identity", noise=0.05),
        SeriesTransformConfig(gain=1.5, bias=-0.2, nonlinearity="tanh", noise=0.05),
        SeriesTransformConfig(gain=0.8, bias=0.1, nonlinearity="square", noise=0.05),
    ]


class DataConfig(_Strict):
    extents: tuple[int, int, int] = (48, 48, 48)
    series: list[SeriesTransformConfig] = Field(default_factory=_default_series)
    blob_count: tuple[int, int] = (2, 5)
    class_rule: Literal["contrast", "shape"] = "contrast"
    lesion_radius: tuple[float, float] = (0.25, 0.35)
    lesion_contrast: tuple[float, float, float, float] = (0.25, 0.55, 0.75, 1.05)
    label_kind: Literal["class", "mask"] = "class"
    # unlabeled pool for pretraining / labeled pool for fine-tuning
    n_pretrain: int = Field(64, ge=1)
    n_labeled: int = Field(100, ge=3)
    normalize: bool = True
    pretrain_manifest: Optional[str] = None
    labeled_manifest: Optional[str] = None

    @property
    def series_count(self) -> int:
        return len(self.series)


class MaskConfig(_Strict):
    intra_ratio: float = Field(0.875, ge=0.0, lt=1.0)
    inter_prob: float = Field(0.5, ge=0.0, le=1.0)
    same_position: bool = False
    series_mask_enabled: bool = True
    reconstruct_masked_series: bool = True
    seed: int = 0


class ModelConfig(_Strict):
    d_enc: int = Field(64, ge=1)
    d_dec: int = Field(48, ge=1)
    enc_depth: int = Field(4, ge=0)
    dec_depth: int = Field(2, ge=0)
    enc_heads: int = Field(4, ge=1)
    dec_heads: int = Field(4, ge=1)
    patch_edge: int = Field(16, ge=1)
    s_max: int = Field(4, ge=1)
    n_max: int = Field(27, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    ln_eps: float = Field(1e-5, gt=0.0)
    init_std: float = Field(0.02, gt=0.0)
    norm_target: bool = False
    precision: Literal["f32", "f64"] = "f32"

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.d_enc % self.enc_heads:
            raise ValueError(f"d_enc={self.d_enc} not divisible by enc_heads={self.enc_heads}")
        if self.d_dec % self.dec_heads:
            raise ValueError(f"d_dec={self.d_dec} not divisible by dec_heads={self.dec_heads}")
        return self


class PretrainConfig(_Strict):
    steps: int = Field(2000, ge=1)
    batch_size: int = Field(6, ge=1)
    base_lr: float = Field(1e-3, gt=0.0)
    min_lr: float = Field(0.0, ge=0.0)
    warmup_steps: int = Field(0, ge=0)
    weight_decay: float = Field(0.01, ge=0.0)
    decoupled_weight_decay: bool = True
    checkpoint_every: int = Field(500, ge=0)
    augment_flip: bool = True
    crop: Optional[tuple[int, int, int]] = None
    epoch_size: Optional[int] = None


class MissingSeriesConfig(_Strict):
    # fraction of subjects (train and test) that lose one or two series
    fraction: float = Field(0.0, ge=0.0, le=1.0)
    max_drop: int = Field(2, ge=1)


class FinetuneConfig(_Strict):
    task: Literal["classification", "segmentation"] = "classification"
    steps: int = Field(300, ge=0)
    batch_size: int = Field(6, ge=1)
    base_lr: float = Field(5e-3, gt=0.0)
    min_lr: float = Field(0.0, ge=0.0)
    weight_decay: float = Field(0.01, ge=0.0)
    decoupled_weight_decay: bool = True
    labeling_ratio: float = Field(1.0, gt=0.0, le=1.0)
    freeze_encoder: bool = False
    augment_flip: bool = False
    checkpoint: Optional[str] = None
    missing: MissingSeriesConfig = Field(default_factory=MissingSeriesConfig)


ARM_IDS = ("full", "no-series-recon", "no-series-mask", "same-position",
           "incomplete-series", "ratio-50")


class AblationConfig(_Strict):
    seeds: int = Field(3, ge=1)
    arms: list[Literal["full", "no-series-recon", "no-series-mask", "same-position",
                       "incomplete-series", "ratio-50"]] = Field(default_factory=lambda: list(ARM_IDS))
    missing_fraction: float = Field(0.5, ge=0.0, le=1.0)
    dump_plans: bool = False


class ExperimentConfig(_Strict):
    seed: int = 0
    deterministic: bool = True
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    mask: MaskConfig = Field(default_factory=MaskConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    @model_validator(mode="after")
    def _cross_checks(self):
        p = self.model.patch_edge
        if any(e % p for e in self.data.extents):
            raise ValueError(f"data.extents {self.data.extents} not divisible by "
                             f"model.patch_edge {p}")
        crop = self.pretrain.crop or self.data.extents
        n_tokens = (crop[0] // p) * (crop[1] // p) * (crop[2] // p)
        if n_tokens > self.model.n_max:
            raise ValueError(f"grid has {n_tokens} tokens but model.n_max is {self.model.n_max}")
        if self.data.series_count > self.model.s_max:
            raise ValueError(f"{self.data.series_count} series exceed model.s_max "
                             f"{self.model.s_max}")
        if self.pretrain.min_lr > self.pretrain.base_lr:
            raise ValueError("pretrain.min_lr exceeds pretrain.base_lr")
        if self.finetune.min_lr > self.finetune.base_lr:
            raise ValueError("finetune.min_lr exceeds finetune.base_lr")
        return self

    def with_updates(self, **sections) -> "ExperimentConfig":
        """Copy with per-section overrides: ``cfg.with_updates(mask={"inter_prob": 1.0})``."""
        doc = self.model_dump(mode="json")
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(doc.get(key), dict):
                doc[key] = {**doc[key], **value}
            else:
                doc[key] = value
        return from_dict(doc)


def _format_error(exc: ValidationError) -> ConfigurationError:
    err = exc.errors()[0]
    path = ".".join(str(p) for p in err["loc"]) or "<root>"
    return ConfigurationError(err["msg"], field=path)


def from_dict(doc: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise _format_error(exc) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}", field="--config") from None
    if path.suffix == ".toml":
        import tomli

        try:
            doc = tomli.loads(raw.decode("utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigurationError(f"invalid TOML: {exc}", field="--config") from None
    else:
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid JSON: {exc}", field="--config") from None
    return from_dict(doc)


def canonical_json(cfg: BaseModel) -> str:
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: BaseModel) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def save_resolved(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True))
