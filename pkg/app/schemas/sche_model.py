from typing import Any, Dict, List, Optional

from pydantic import Field, PositiveFloat, confloat, conint, field_validator, model_validator

from app.helpers.enums import HistoMode, Modality
from app.schemas.sche_base import ArraySchemaBase, ConfigSchemaBase
from app.schemas.sche_cohort import GroupingScheme

PRESETS = {
    "morpheus": {"encoder_layers": 1, "decoder_layers": 1},
    "morpheus-2L": {"encoder_layers": 2, "decoder_layers": 2},
}


class ModelConfig(ConfigSchemaBase):
    d: conint(ge=1) = 256
    heads: conint(ge=1) = 8
    mlp_dim: conint(ge=1) = 256
    encoder_layers: conint(ge=1) = 1
    decoder_layers: conint(ge=1) = 1
    dropout: confloat(ge=0, lt=1) = 0.15
    num_prototypes: conint(ge=1) = 32
    histo_mode: HistoMode = HistoMode.PROTOTYPE
    prototype_residual: bool = True
    abmil_hidden: conint(ge=1) = 128
    modalities: List[Modality] = Field(default_factory=lambda: list(Modality.omics()))
    mask_ratio: confloat(ge=0, le=1) = 0.75
    alpha: PositiveFloat = 1.0
    patch_sample: conint(ge=1) = 1024
    # filled from the cohort when the model is built
    patch_dim: Optional[conint(ge=1)] = None
    group_counts: Dict[Modality, int] = Field(default_factory=dict)

    @field_validator("modalities")
    @classmethod
    def check_modalities(cls, v):
        if not v:
            raise ValueError("at least one omics modality is required")
        if Modality.WSI in v:
            raise ValueError("wsi is always present and is not listed among omics modalities")
        if len(set(v)) != len(v):
            raise ValueError("duplicate modality")
        return [m for m in Modality.omics() if m in v]

    @model_validator(mode="after")
    def check_heads(self):
        if self.d % self.heads:
            raise ValueError(f"heads={self.heads} does not divide d={self.d}")
        return self

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})


class CheckpointData(ArraySchemaBase):
    """Everything a checkpoint file restores."""

    config: ModelConfig
    groupings: Dict[Modality, GroupingScheme]
    feature_selection: Dict[Modality, List[int]] = Field(default_factory=dict)
    tensors: Dict[str, Any]
    optimizer_moments: Dict[str, Any] = Field(default_factory=dict)
    optimizer_steps: Dict[str, float] = Field(default_factory=dict)
    step_count: int = 0
    lr: Optional[float] = None
    rng: Dict[str, Any] = Field(default_factory=dict)
    extra: Dict[str, Any] = Field(default_factory=dict)
