from typing import List

from pydantic import Field, NonNegativeFloat, conint, confloat, model_validator

from app.schemas.sche_base import ConfigSchemaBase


class ModalityShape(ConfigSchemaBase):
    num_features: conint(ge=1)
    num_groups: conint(ge=1)
    noise_std: NonNegativeFloat = 0.3

    @model_validator(mode="after")
    def check_groups(self):
        if self.num_groups > self.num_features:
            raise ValueError("num_groups cannot exceed num_features")
        return self


class SubtypeRule(ConfigSchemaBase):
    latent_coordinate: conint(ge=0) = 0
    threshold: float = 0.0


class SurvivalRule(ConfigSchemaBase):
    """risk = scale * <weights, z>; event times ~ Exp(rate = exp(risk))."""

    weights: List[float] = Field(default_factory=lambda: [0.0, 1.0])
    scale: confloat(ge=0) = 1.0
    censoring_rate: confloat(ge=0, lt=1) = 0.3


class SynthConfig(ConfigSchemaBase):
    num_patients: conint(ge=2) = 512
    latent_dim: conint(ge=1) = 8
    patches_min: conint(ge=1) = 8
    patches_max: conint(ge=1) = 32
    patch_dim: conint(ge=1) = 32
    patch_noise_std: NonNegativeFloat = 0.3
    chromosomes: conint(ge=1) = 4
    rna: ModalityShape = ModalityShape(num_features=120, num_groups=12, noise_std=0.3)
    dnam: ModalityShape = ModalityShape(num_features=150, num_groups=15, noise_std=0.3)
    cnv: ModalityShape = ModalityShape(num_features=100, num_groups=10, noise_std=0.3)
    subtype: SubtypeRule = SubtypeRule()
    survival: SurvivalRule = SurvivalRule()
    pretrain_fraction: confloat(ge=0, le=1) = 0.6
    seed: conint(ge=0) = 0

    @model_validator(mode="after")
    def check_config(self):
        if self.patches_min > self.patches_max:
            raise ValueError("patches_min cannot exceed patches_max")
        if self.subtype.latent_coordinate >= self.latent_dim:
            raise ValueError("subtype latent_coordinate must index the latent vector")
        if len(self.survival.weights) > self.latent_dim:
            raise ValueError("survival weights longer than the latent vector")
        return self
