"""
Synthetic multimodal cohorts with a known latent structure.

Every patient draws a latent z ~ N(0, I_p). Patch embeddings and omics profiles
are fixed random linear maps of z plus noise, generated directly in transformed
value space; subtype and survival are functions of z, so every downstream
result has an independent oracle.
"""

import logging
from typing import Dict, Iterable, Tuple

import numpy as np
from sklearn.linear_model import Ridge
from sklearn.model_selection import train_test_split

from app.core.seeding import SeedStreams
from app.helpers.enums import CohortSplit, Modality
from app.schemas.sche_cohort import (
    Cohort,
    FeatureTable,
    OmicsProfile,
    PatchEmbeddingSet,
    PatientRecord,
    SurvivalLabel,
)
from app.schemas.sche_synth import SynthConfig
from app.services.srv_cohort import CohortService
from app.services.srv_recon_eval import pearson_per_feature
from app.services.srv_transforms import cluster_by_position, contiguous_groups

logger = logging.getLogger(__name__)

# (offset, scale, lower bound, upper bound) in transformed space
VALUE_SPACE = {
    Modality.RNA: (6.0, 1.0, 0.0, None),
    Modality.DNAM: (0.5, 0.08, 0.0, 1.0),
    Modality.CNV: (0.3, 0.05, 0.0, None),
}
RIDGE_PENALTY = 1e-3


class SynthService(object):
    def __init__(self, config: SynthConfig):
        self.config = config
        self.streams = SeedStreams(config.seed)
        self._draw_maps()

    def _shape(self, modality: Modality):
        return getattr(self.config, modality.value)

    def _draw_maps(self):
        cfg = self.config
        rng = self.streams.numpy("init", 0)
        p = cfg.latent_dim
        self.patch_map = rng.normal(0.0, 1.0 / np.sqrt(p), size=(p, cfg.patch_dim))
        self.omics_maps = {
            m: rng.normal(0.0, 1.0 / np.sqrt(p), size=(p, self._shape(m).num_features)) for m in Modality.omics()
        }
        self.features: Dict[Modality, FeatureTable] = {}
        for modality in (Modality.DNAM, Modality.CNV):
            n = self._shape(modality).num_features
            chunks = np.array_split(np.arange(n), min(cfg.chromosomes, n))
            chroms, positions = [], []
            for c, chunk in enumerate(chunks, start=1):
                chroms.extend([str(c)] * chunk.size)
                positions.extend(np.sort(rng.choice(10 ** 8, size=chunk.size, replace=False)).tolist())
            self.features[modality] = FeatureTable(
                feature_ids=[f"{modality.value}_{i:05d}" for i in range(n)],
                chromosomes=chroms,
                positions=np.asarray(positions, dtype=np.int64),
            )

    def groupings(self):
        groupings = {Modality.RNA: contiguous_groups(self.config.rna.num_features, self.config.rna.num_groups, Modality.RNA)}
        for modality in (Modality.DNAM, Modality.CNV):
            table = self.features[modality]
            groupings[modality] = cluster_by_position(
                table.chromosomes, table.positions, self._shape(modality).num_groups, modality
            )
        return groupings

    def _patient(self, index: int):
        cfg = self.config
        rng = self.streams.numpy("data", 0, index)
        z = rng.standard_normal(cfg.latent_dim)

        num_patches = int(rng.integers(cfg.patches_min, cfg.patches_max + 1))
        patches = z @ self.patch_map + cfg.patch_noise_std * rng.standard_normal((num_patches, cfg.patch_dim))

        omics = {}
        for modality in Modality.omics():
            offset, scale, lower, upper = VALUE_SPACE[modality]
            noise = self._shape(modality).noise_std * rng.standard_normal(self._shape(modality).num_features)
            omics[modality] = np.clip(offset + scale * (z @ self.omics_maps[modality] + noise), lower, upper)

        weights = np.asarray(cfg.survival.weights)
        risk = cfg.survival.scale * float(weights @ z[: weights.size])
        event_time = rng.exponential(1.0 / np.exp(risk))
        censor_draw, censor_fraction = rng.random(), rng.random()
        if censor_draw < cfg.survival.censoring_rate:
            survival = SurvivalLabel(time=event_time * (1.0 - censor_fraction), event=False)
        else:
            survival = SurvivalLabel(time=event_time, event=True)

        subtype = "1" if z[cfg.subtype.latent_coordinate] > cfg.subtype.threshold else "0"
        return z, patches, omics, subtype, survival

    def generate_cohort(self) -> Tuple[Cohort, np.ndarray]:
        """Cohort plus the latent matrix (patients x p) it was drawn from."""
        cfg = self.config
        drawn = [self._patient(i) for i in range(cfg.num_patients)]
        ids = [f"P{i:05d}" for i in range(cfg.num_patients)]

        records = []
        for pid, (z, patches, omics, subtype, survival) in zip(ids, drawn):
            records.append(PatientRecord(
                patient_id=pid,
                patches=PatchEmbeddingSet(embeddings=patches, source_slide_ids=[f"{pid}-S0"] * patches.shape[0]),
                omics={m: OmicsProfile(modality=m, values=v, transformed=True) for m, v in omics.items()},
                subtype_label=subtype,
                survival=survival,
            ))

        pretrain, _ = CohortService.split_cohort(records, cfg.pretrain_fraction, "subtype", cfg.seed)
        pretrain = set(pretrain)
        records = [
            r.model_copy(update={"split": CohortSplit.PRETRAIN if r.patient_id in pretrain else CohortSplit.DOWNSTREAM})
            for r in records
        ]
        cohort = Cohort(
            records=records,
            groupings=self.groupings(),
            feature_counts={m: self._shape(m).num_features for m in Modality.omics()},
            patch_dim=cfg.patch_dim,
            features=self.features,
        )
        logger.info("generated %d synthetic patients (%d pretrain)", len(records), len(pretrain))
        return cohort, np.stack([d[0] for d in drawn])


def generate_cohort(config: SynthConfig) -> Cohort:
    return SynthService(config).generate_cohort()[0]


def _design_matrix(cohort: Cohort, inputs: Iterable[Modality]) -> np.ndarray:
    blocks = []
    for modality in inputs:
        if modality == Modality.WSI:
            blocks.append(cohort.mean_patch_matrix())
        else:
            blocks.append(cohort.omics_matrix(modality))
    return np.concatenate(blocks, axis=1)


def oracle_split(num_patients: int, fit_fraction: float = 0.5, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """(fit rows, held-out rows) shared by the oracle and the model it is compared with."""
    return train_test_split(np.arange(num_patients), train_size=fit_fraction, random_state=seed)


def linear_oracle(
    cohort: Cohort,
    inputs: Iterable[Modality],
    target: Modality,
    fit_fraction: float = 0.5,
    seed: int = 0,
) -> np.ndarray:
    """
    Ridge regression baseline (penalty 1e-3 * n) from the input modalities to every target feature.

    Returns the held-out per-feature Pearson correlations; undefined (constant)
    features are NaN.
    """
    inputs = [m for m in Modality if m in set(inputs)]
    if not inputs:
        raise ValueError("linear oracle needs at least one input modality")
    x = _design_matrix(cohort, inputs)
    y = cohort.omics_matrix(target)
    fit_idx, eval_idx = oracle_split(len(cohort), fit_fraction, seed)
    model = Ridge(alpha=RIDGE_PENALTY * fit_idx.size)
    model.fit(x[fit_idx], y[fit_idx])
    return pearson_per_feature(model.predict(x[eval_idx]), y[eval_idx])
