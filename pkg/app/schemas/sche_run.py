from typing import Dict, List, Optional

import toml
from pydantic import Field, PositiveFloat, confloat, conint, field_validator, model_validator

from app.core.config import settings
from app.core.optim import LrSchedule
from app.helpers.enums import FinetuneScope, Modality
from app.schemas.sche_base import ConfigSchemaBase
from app.schemas.sche_model import PRESETS, ModelConfig
from app.schemas.sche_synth import SynthConfig


def _omics_only(values: List[Modality]) -> List[Modality]:
    """`wsi` is always conditioned on; listing it is allowed and ignored."""
    values = [m for m in values if m != Modality.WSI]
    if len(set(values)) != len(values):
        raise ValueError("duplicate modality")
    return [m for m in Modality.omics() if m in values]


class ComboConfig(ConfigSchemaBase):
    inputs: List[Modality] = Field(default_factory=list)
    target: Modality

    @field_validator("inputs")
    @classmethod
    def check_inputs(cls, v):
        return _omics_only(v)

    @model_validator(mode="after")
    def check_target(self):
        if self.target == Modality.WSI:
            raise ValueError("wsi cannot be a generation target")
        if self.target in self.inputs:
            raise ValueError(f"target {self.target.value} is also an input")
        return self

    @property
    def label(self) -> str:
        return "+".join(["wsi"] + [m.value for m in self.inputs]) + "->" + self.target.value


def default_combos() -> List[ComboConfig]:
    combos = []
    for target in Modality.omics():
        combos.append(ComboConfig(inputs=[], target=target))
        for other in Modality.omics():
            if other != target:
                combos.append(ComboConfig(inputs=[other], target=target))
    return combos


STD_PRESETS = {
    "reconstruction": {Modality.DNAM: 0.15, Modality.CNV: 0.1},
}


class DataConfig(ConfigSchemaBase):
    cohort: Optional[str] = None
    eval_cohort: Optional[str] = None
    use_split: bool = True
    variance_keep: Dict[Modality, conint(ge=1)] = Field(default_factory=dict)
    std_threshold: Dict[Modality, confloat(ge=0)] = Field(default_factory=dict)
    max_missing_fraction: confloat(ge=0, le=1) = 0.99
    num_clusters: Dict[Modality, conint(ge=1)] = Field(default_factory=dict)
    # named std thresholds; explicit `std_threshold` entries win
    std_preset: Optional[str] = None

    @model_validator(mode="after")
    def apply_std_preset(self):
        if self.std_preset is None:
            return self
        if self.std_preset not in STD_PRESETS:
            raise ValueError(f"unknown std_preset '{self.std_preset}', expected one of {sorted(STD_PRESETS)}")
        merged = {**STD_PRESETS[self.std_preset], **self.std_threshold}
        if merged != self.std_threshold:
            self.std_threshold = merged
        return self


class PretrainConfig(ConfigSchemaBase):
    epochs: conint(ge=1) = 200
    batch_size: conint(ge=1) = 128
    weight_decay: confloat(ge=0) = 1e-3
    warmup_epochs: conint(ge=0) = 10
    lr_start: PositiveFloat = 5e-5
    lr_peak: PositiveFloat = 5e-4
    lr_final: PositiveFloat = 1.5e-4
    checkpoint_every: conint(ge=0) = 10
    log_mask_plans: bool = False
    resume: Optional[str] = None

    @model_validator(mode="after")
    def check_warmup(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs cannot exceed epochs")
        return self

    def schedule(self) -> LrSchedule:
        return LrSchedule(
            warmup_epochs=self.warmup_epochs,
            lr_start=self.lr_start,
            lr_peak=self.lr_peak,
            lr_final=self.lr_final,
            total_epochs=self.epochs,
        )


class SubtypeConfig(ConfigSchemaBase):
    k: conint(ge=1) = 10
    runs: conint(ge=1) = 10
    epochs: conint(ge=0) = 5
    batch_size: conint(ge=1) = 1
    lr: PositiveFloat = 5e-5
    dropout: confloat(ge=0, lt=1) = 0.35
    weight_decay: confloat(ge=0) = 1e-2
    visible: List[Modality] = Field(default_factory=list)
    finetune_scope: FinetuneScope = FinetuneScope.FULL

    @field_validator("visible")
    @classmethod
    def check_visible(cls, v):
        return _omics_only(v)

    def schedule(self) -> LrSchedule:
        return LrSchedule.constant(self.lr, max(self.epochs, 1))


class SurvivalConfig(ConfigSchemaBase):
    folds: conint(ge=2) = 5
    epochs: conint(ge=0) = 20
    batch_size: conint(ge=1) = 32
    num_intervals: conint(ge=2) = 4
    dropout: confloat(ge=0, lt=1) = 0.35
    weight_decay: confloat(ge=0) = 1e-2
    warmup_epochs: conint(ge=0) = 5
    lr_start: PositiveFloat = 1e-5
    lr_peak: PositiveFloat = 5e-5
    lr_final: PositiveFloat = 6e-6
    visible: List[Modality] = Field(default_factory=list)
    finetune_scope: FinetuneScope = FinetuneScope.FULL

    @field_validator("visible")
    @classmethod
    def check_visible(cls, v):
        return _omics_only(v)

    def schedule(self) -> LrSchedule:
        total = max(self.epochs, 1)
        return LrSchedule(
            warmup_epochs=min(self.warmup_epochs, total),
            lr_start=self.lr_start,
            lr_peak=self.lr_peak,
            lr_final=self.lr_final,
            total_epochs=total,
        )


class GenerateConfig(ConfigSchemaBase):
    combos: List[ComboConfig] = Field(default_factory=default_combos)
    threshold_step: confloat(gt=0, le=1) = 0.05
    write_profiles: bool = True


class EvaluateConfig(ConfigSchemaBase):
    combos: List[ComboConfig] = Field(default_factory=default_combos)
    threshold_step: confloat(gt=0, le=1) = 0.05
    significance_level: confloat(gt=0, lt=1) = 0.01
    oracle_fit_fraction: confloat(gt=0, lt=1) = 0.5
    direction_target: Modality = Modality.DNAM


class RunConfig(ConfigSchemaBase):
    seed: conint(ge=0) = settings.DEFAULT_SEED
    out: str = settings.DEFAULT_OUTPUT_DIR
    threads: conint(ge=1) = settings.DEFAULT_THREADS
    checkpoint: Optional[str] = None
    preset: Optional[str] = None
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    subtype: SubtypeConfig = Field(default_factory=SubtypeConfig)
    survival: SurvivalConfig = Field(default_factory=SurvivalConfig)
    generate: GenerateConfig = Field(default_factory=GenerateConfig)
    evaluate: EvaluateConfig = Field(default_factory=EvaluateConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)

    @model_validator(mode="before")
    @classmethod
    def apply_preset(cls, data):
        if isinstance(data, dict) and data.get("preset"):
            name = data["preset"]
            if name not in PRESETS:
                raise ValueError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}")
            model = dict(data.get("model") or {})
            for key, value in PRESETS[name].items():
                model.setdefault(key, value)
            data = {**data, "model": model}
        return data

    def to_toml(self) -> str:
        return toml.dumps(self.model_dump(mode="json", exclude_none=True))

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        return cls.model_validate(toml.loads(text))
