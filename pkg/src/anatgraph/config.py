"""Run configuration: one pydantic model per section, unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator

Triple = tuple[int, int, int]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridConfig(_Section):
    patch_size: int = Field(16, ge=1)
    step: int = Field(16, ge=1)
    # None -> 1.1 x step in mm, i.e. 6-connectivity on the atlas grid
    rho_mm: float | None = Field(None, gt=0)

    @model_validator(mode="after")
    def _step_le_patch(self):
        if self.step > self.patch_size:
            raise ValueError("step must not exceed patch_size")
        return self

    def rho(self, spacing: float) -> float:
        return self.rho_mm if self.rho_mm is not None else 1.1 * self.step * spacing


class ModelConfig(_Section):
    channels: tuple[int, ...] = (4, 8, 16, 32)
    convs_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    feature_dim: int = Field(32, ge=1)
    momentum: float = Field(0.999, ge=0.0, lt=1.0)
    normalize_embeddings: bool = True

    @model_validator(mode="after")
    def _ladder(self):
        if len(self.channels) != len(self.convs_per_stage) or not self.channels:
            raise ValueError("channels and convs_per_stage must be non-empty and of equal length")
        if any(c < 1 for c in self.channels) or any(n < 1 for n in self.convs_per_stage):
            raise ValueError("channel counts and convs per stage must be >= 1")
        return self

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        # 32^3 patches, 128-d features
        return cls(channels=(8, 16, 32, 64, 128), convs_per_stage=(1, 2, 2, 2, 1), feature_dim=128)


class AugmentConfig(_Section):
    elastic_spacing: int = Field(8, ge=1)
    elastic_sigma: float = Field(2.0, ge=0.0)
    noise_sigma: float = Field(0.05, ge=0.0)
    contrast_lo: float = Field(0.8, gt=0.0)
    contrast_hi: float = Field(1.25, gt=0.0)
    p_elastic: float = Field(1.0, ge=0.0, le=1.0)
    p_noise: float = Field(1.0, ge=0.0, le=1.0)
    p_contrast: float = Field(1.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _contrast_order(self):
        if self.contrast_lo > self.contrast_hi:
            raise ValueError("contrast_lo must be <= contrast_hi")
        return self

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(elastic_sigma=0.0, noise_sigma=0.0, contrast_lo=1.0, contrast_hi=1.0)


class TrainConfig(_Section):
    t_max: int = Field(4, ge=1)
    t_l: int = Field(1, ge=1)
    t_g: int = Field(1, ge=1)
    batch_patch: int = Field(128, ge=2)
    batch_graph: int = Field(16, ge=2)
    lr: float = Field(3e-2, ge=0.0)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    schedule: Literal["cosine", "constant"] = "cosine"
    tau: float = Field(0.2, gt=0.0)
    patch_queue: int = Field(128, ge=1)
    graph_queue: int = Field(512, ge=1)
    # fill patch queues with key embeddings before the first step
    prime_patch_queues: bool = True
    ordered_regions: bool = False


class ProbeConfig(_Section):
    k: int = Field(5, ge=2)
    ridge_lambda: float = Field(1e-3, ge=0.0)
    logistic_lambda: float = Field(1e-3, ge=0.0)
    max_iter: int = Field(2000, ge=1)
    tol: float = Field(1e-6, ge=0.0)


class DeformConfig(_Section):
    scale: float = Field(0.1, ge=0.0, lt=0.5)
    rotation_deg: float = Field(5.0, ge=0.0, le=45.0)
    translation_mm: float = Field(2.0, ge=0.0)
    displacement_mm: float = Field(2.0, ge=0.0)
    displacement_spacing: int = Field(16, ge=2)

    @classmethod
    def none(cls) -> "DeformConfig":
        return cls(scale=0.0, rotation_deg=0.0, translation_mm=0.0, displacement_mm=0.0)

    @property
    def is_identity(self) -> bool:
        return self.scale == 0 and self.rotation_deg == 0 and self.translation_mm == 0 and self.displacement_mm == 0


class SynthConfig(_Section):
    atlas_dims: Triple = (64, 64, 64)
    spacing_mm: float = Field(1.0, gt=0.0)
    n_subjects: int = Field(40, ge=1)
    n_classes: int = Field(2, ge=2)
    # atlas-frame voxel box [lo, hi) per axis (z, y, x)
    lesion_box: tuple[Triple, Triple] = ((16, 16, 8), (48, 48, 40))
    texture_freq: tuple[float, ...] = (0.12, 0.25)
    texture_amp: tuple[float, ...] = (0.45, 0.45)
    severity_range: tuple[tuple[float, float], ...] = ((0.0, 0.2), (0.5, 1.0))
    noise_sigma: tuple[float, float] = (0.0, 0.0)
    # per-subject contrast power law sign(v)|v|^g, g drawn from this range
    gamma_range: tuple[float, float] = (1.0, 1.0)
    # ellipsoid semi-axis as a fraction of each atlas extent
    body_radius: float = Field(0.45, gt=0.0, le=1.0)
    deform: DeformConfig = DeformConfig()

    @field_validator("lesion_box")
    @classmethod
    def _box_inside(cls, box, info: ValidationInfo):
        dims = info.data.get("atlas_dims")
        lo, hi = box
        for ax in range(3):
            if not 0 <= lo[ax] < hi[ax]:
                raise ValueError(f"lesion box axis {ax}: need 0 <= lo < hi, got {lo[ax]}..{hi[ax]}")
            if dims is not None and hi[ax] > dims[ax]:
                raise ValueError(f"lesion box axis {ax} ends at {hi[ax]} beyond atlas size {dims[ax]}")
        return box

    @model_validator(mode="after")
    def _per_class(self):
        for name in ("texture_freq", "texture_amp", "severity_range"):
            if len(getattr(self, name)) != self.n_classes:
                raise ValueError(f"{name} needs one entry per class ({self.n_classes})")
        for amp, (s_lo, s_hi) in zip(self.texture_amp, self.severity_range):
            if not 0.0 <= s_lo <= s_hi <= 1.0:
                raise ValueError("severity ranges must lie in [0, 1]")
            if amp < 0 or amp > 1:
                raise ValueError("texture amplitudes must lie in [0, 1]")
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise ValueError("gamma_range needs 0 < lo <= hi")
        lo, hi = self.noise_sigma
        if not 0 <= lo <= hi:
            raise ValueError("noise_sigma needs 0 <= lo <= hi")
        return self


class RunConfig(_Section):
    seed: int = 0
    data: SynthConfig = SynthConfig()
    grid: GridConfig = GridConfig()
    model: ModelConfig = ModelConfig()
    augment: AugmentConfig = AugmentConfig()
    train: TrainConfig = TrainConfig()
    probe: ProbeConfig = ProbeConfig()

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides) -> "RunConfig":
        raw = json.loads(Path(path).read_text()) if path else {}
        for dotted, value in overrides.items():
            node = raw
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = value
        return cls.model_validate(raw)

    def hash(self) -> str:
        return config_hash(self)


def canonical_json(model: BaseModel) -> str:
    return json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(model: BaseModel) -> str:
    return hashlib.sha256(canonical_json(model).encode("utf-8")).hexdigest()
