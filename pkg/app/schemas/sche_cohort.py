from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import PositiveFloat, conint, field_validator, model_validator

from app.helpers.enums import CohortSplit, Modality, ValueSpace
from app.schemas.sche_base import ArraySchemaBase, ConfigSchemaBase


class PatchEmbeddingSet(ArraySchemaBase):
    embeddings: np.ndarray
    source_slide_ids: List[str]

    @field_validator("embeddings")
    @classmethod
    def check_embeddings(cls, v):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"patch embeddings must be a matrix, got {v.ndim} dimension(s)")
        if v.shape[0] < 1:
            raise ValueError("at least one patch embedding is required")
        if not np.isfinite(v).all():
            raise ValueError("patch embeddings contain non-finite values")
        return v

    @model_validator(mode="after")
    def check_slide_ids(self):
        if len(self.source_slide_ids) != self.embeddings.shape[0]:
            raise ValueError("one source slide id is required per patch row")
        return self

    @property
    def num_patches(self) -> int:
        return self.embeddings.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def from_slides(cls, slides: Sequence[Tuple[str, np.ndarray]]) -> "PatchEmbeddingSet":
        """Concatenate the patches of several slides of one patient."""
        if not slides:
            raise ValueError("at least one slide is required")
        ids = [slide_id for slide_id, rows in slides for _ in range(np.asarray(rows).shape[0])]
        return cls(embeddings=np.concatenate([np.asarray(rows) for _, rows in slides]), source_slide_ids=ids)


class OmicsProfile(ArraySchemaBase):
    modality: Modality
    values: np.ndarray
    transformed: bool = True

    @field_validator("modality")
    @classmethod
    def check_modality(cls, v):
        if v == Modality.WSI:
            raise ValueError("wsi is not an omics modality")
        return v

    @field_validator("values")
    @classmethod
    def check_values(cls, v):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("omics values must be a vector")
        if v.size == 0:
            raise ValueError("omics vector is empty")
        if not np.isfinite(v).all():
            raise ValueError("omics values contain non-finite entries")
        return v

    @model_validator(mode="after")
    def check_range(self):
        if self.modality == Modality.DNAM:
            bad = np.flatnonzero((self.values < 0.0) | (self.values > 1.0))
            if bad.size:
                raise ValueError(f"value {self.values[bad[0]]} at index {bad[0]} outside [0, 1]")
        elif self.transformed:
            bad = np.flatnonzero(self.values < 0.0)
            if bad.size:
                raise ValueError(f"negative transformed value at index {bad[0]}")
        return self

    def __len__(self):
        return self.values.size


class SurvivalLabel(ArraySchemaBase):
    time: PositiveFloat
    event: bool


class PatientRecord(ArraySchemaBase):
    patient_id: str
    patches: PatchEmbeddingSet
    omics: Dict[Modality, OmicsProfile] = {}
    subtype_label: Optional[str] = None
    survival: Optional[SurvivalLabel] = None
    split: Optional[CohortSplit] = None
    # declared-missing entries (before imputation), per modality
    missing: Dict[Modality, np.ndarray] = {}

    @model_validator(mode="after")
    def check_omics(self):
        for modality, profile in self.omics.items():
            if modality == Modality.WSI:
                raise ValueError("wsi cannot be stored as an omics profile")
            if profile.modality != modality:
                raise ValueError(f"profile stored under {modality.value} is {profile.modality.value}")
        return self

    def has(self, modality: Modality) -> bool:
        return modality == Modality.WSI or modality in self.omics


class GroupingScheme(ArraySchemaBase):
    """Feature groups of one omics modality; each group drives one token."""

    modality: Modality
    group_indices: List[np.ndarray]
    group_names: List[str]
    num_features: int

    @field_validator("group_indices", mode="before")
    @classmethod
    def normalise_indices(cls, v):
        return [np.unique(np.asarray(group, dtype=np.int64)) for group in v]

    @model_validator(mode="after")
    def check_groups(self):
        if not self.group_indices:
            raise ValueError("grouping needs at least one group")
        if len(self.group_names) != len(self.group_indices):
            raise ValueError("one name is required per group")
        for name, group in zip(self.group_names, self.group_indices):
            if group.size == 0:
                raise ValueError(f"group '{name}' selects no feature")
            if group[0] < 0 or group[-1] >= self.num_features:
                raise ValueError(f"group '{name}' indexes outside [0, {self.num_features})")
        if self.modality in (Modality.DNAM, Modality.CNV):
            counts = np.bincount(np.concatenate(self.group_indices), minlength=self.num_features)
            if (counts > 1).any():
                raise ValueError(f"{self.modality.value} groups overlap at feature {int(np.argmax(counts > 1))}")
            if (counts == 0).any():
                raise ValueError(f"{self.modality.value} groups leave feature {int(np.argmin(counts))} uncovered")
        return self

    @property
    def num_groups(self) -> int:
        return len(self.group_indices)

    @property
    def sizes(self) -> List[int]:
        return [int(g.size) for g in self.group_indices]


class FeatureTable(ArraySchemaBase):
    """Genomic location of every feature of one modality."""

    feature_ids: List[str]
    chromosomes: List[str]
    positions: np.ndarray

    @model_validator(mode="after")
    def check_lengths(self):
        if not (len(self.feature_ids) == len(self.chromosomes) == len(self.positions)):
            raise ValueError("feature ids, chromosomes and positions differ in length")
        return self

    def __len__(self):
        return len(self.feature_ids)

    def take(self, indices: Sequence[int]) -> "FeatureTable":
        indices = list(indices)
        return FeatureTable(
            feature_ids=[self.feature_ids[i] for i in indices],
            chromosomes=[self.chromosomes[i] for i in indices],
            positions=np.asarray(self.positions)[indices],
        )


class Cohort(ArraySchemaBase):
    records: List[PatientRecord]
    groupings: Dict[Modality, GroupingScheme]
    feature_counts: Dict[Modality, int]
    patch_dim: int
    features: Dict[Modality, FeatureTable] = {}

    def __len__(self):
        return len(self.records)

    @property
    def ids(self) -> List[str]:
        return [r.patient_id for r in self.records]

    def subset(self, ids: Sequence[str]) -> "Cohort":
        index = {r.patient_id: r for r in self.records}
        return self.model_copy(update={"records": [index[i] for i in ids]})

    def omics_matrix(self, modality: Modality) -> np.ndarray:
        """Patients x features matrix; every record must carry the modality."""
        return np.stack([r.omics[modality].values for r in self.records])

    def mean_patch_matrix(self) -> np.ndarray:
        return np.stack([r.patches.embeddings.mean(axis=0) for r in self.records])


class ModalityEntry(ConfigSchemaBase):
    num_features: conint(ge=1)
    value_space: ValueSpace = ValueSpace.RAW
    grouping: str
    features: Optional[str] = None


class PatientEntry(ConfigSchemaBase):
    id: str
    slides: List[str]
    rna: Optional[str] = None
    dnam: Optional[str] = None
    cnv: Optional[str] = None
    cnv_missing: Optional[str] = None
    subtype: Optional[str] = None
    survival_time: Optional[float] = None
    survival_event: Optional[bool] = None
    split: Optional[CohortSplit] = None

    def payload(self, modality: Modality) -> Optional[str]:
        return getattr(self, modality.value)


class CohortManifest(ConfigSchemaBase):
    format_version: conint(ge=1) = 1
    patch_dim: conint(ge=1)
    modalities: Dict[Modality, ModalityEntry]
    exclude_chromosomes: List[str] = []
    variance_split: Optional[CohortSplit] = None
    patients: List[PatientEntry]

    @model_validator(mode="after")
    def check_modalities(self):
        if Modality.WSI in self.modalities:
            raise ValueError("wsi is described by patch_dim and patient slides, not a modality entry")
        ids = [p.id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate patient id")
        return self
