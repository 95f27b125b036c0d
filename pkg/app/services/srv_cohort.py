import logging
import os
from collections import OrderedDict
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError
from sklearn.model_selection import train_test_split
from tqdm import tqdm

from app.db import cohort_store
from app.helpers.enums import CohortSplit, Modality, ValueSpace
from app.helpers.exception_handler import ConfigError, DataValidationError, get_message_validation
from app.schemas.sche_cohort import (
    Cohort,
    CohortManifest,
    GroupingScheme,
    ModalityEntry,
    OmicsProfile,
    PatchEmbeddingSet,
    PatientEntry,
    PatientRecord,
    SurvivalLabel,
)
from app.schemas.sche_run import DataConfig
from app.services.srv_transforms import (
    FeatureSelectionService,
    OmicsTransformService,
    cluster_by_position,
    restrict_grouping,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.toml"


def _wrap(e: ValidationError, patient_id: str, field: str) -> DataValidationError:
    return DataValidationError(get_message_validation(e), patient_id=patient_id, field=field)


class CohortService(object):
    """Load, validate, write, split and preprocess cohorts."""

    @staticmethod
    def load_cohort(manifest_path: str) -> Cohort:
        manifest = cohort_store.read_manifest(manifest_path)
        root = os.path.dirname(os.path.abspath(manifest_path))

        features, keep, groupings, counts = {}, {}, {}, {}
        for modality, entry in manifest.modalities.items():
            kept = None
            if entry.features:
                table = cohort_store.read_features(os.path.join(root, entry.features))
                if len(table) != entry.num_features:
                    raise DataValidationError(
                        f"feature table lists {len(table)} features, manifest declares {entry.num_features}",
                        field=f"{modality.value} features",
                    )
                if manifest.exclude_chromosomes:
                    kept = FeatureSelectionService.exclude_chromosomes(table.chromosomes, manifest.exclude_chromosomes)
                    table = table.take(kept)
                features[modality] = table
            elif manifest.exclude_chromosomes and modality != Modality.RNA:
                raise DataValidationError(
                    "chromosome exclusion requires a feature table", field=f"{modality.value} features"
                )
            keep[modality] = kept
            counts[modality] = len(kept) if kept is not None else entry.num_features
            # grouping files index the payload order on disk, before chromosome exclusion
            grouping = cohort_store.read_grouping(os.path.join(root, entry.grouping), modality, entry.num_features)
            groupings[modality] = restrict_grouping(grouping, kept) if kept is not None else grouping

        records = [
            CohortService._load_patient(root, manifest, patient, keep)
            for patient in tqdm(manifest.patients, desc="Loading cohort", disable=len(manifest.patients) < 64)
        ]
        logger.info("loaded %d patients from %s", len(records), manifest_path)
        return Cohort(
            records=records,
            groupings=groupings,
            feature_counts=counts,
            patch_dim=manifest.patch_dim,
            features=features,
        )

    @staticmethod
    def _load_patient(root: str, manifest: CohortManifest, patient: PatientEntry, keep: Dict) -> PatientRecord:
        pid = patient.id
        if not patient.slides:
            raise DataValidationError("no slide listed", patient_id=pid, field="wsi")
        slides = []
        for slide_path in patient.slides:
            flat = cohort_store.read_payload(os.path.join(root, slide_path))
            if flat.size == 0 or flat.size % manifest.patch_dim:
                raise DataValidationError(
                    f"{flat.size} values do not form rows of patch_dim {manifest.patch_dim}",
                    patient_id=pid,
                    field="wsi",
                )
            slide_id = os.path.splitext(os.path.basename(slide_path))[0]
            slides.append((slide_id, flat.reshape(-1, manifest.patch_dim)))
        try:
            patches = PatchEmbeddingSet.from_slides(slides)
        except ValidationError as e:
            raise _wrap(e, pid, "wsi")

        omics, missing = {}, {}
        for modality, entry in manifest.modalities.items():
            rel_path = patient.payload(modality)
            if rel_path is None:
                continue
            raw = cohort_store.read_payload(os.path.join(root, rel_path))
            if raw.size != entry.num_features:
                raise DataValidationError(
                    f"length mismatch: got {raw.size}, expected {entry.num_features}",
                    patient_id=pid,
                    field=modality.value,
                )
            declared = None
            if modality == Modality.CNV and patient.cnv_missing:
                declared = cohort_store.read_payload(os.path.join(root, patient.cnv_missing)) != 0
                if declared.size != raw.size:
                    raise DataValidationError("missing mask length mismatch", patient_id=pid, field="cnv_missing")
            try:
                values = CohortService._to_transformed(modality, entry, raw, declared)
                if keep.get(modality) is not None:
                    values = values[keep[modality]]
                    declared = declared[keep[modality]] if declared is not None else None
                omics[modality] = OmicsProfile(modality=modality, values=values, transformed=True)
            except ValueError as e:
                raise DataValidationError(str(e), patient_id=pid, field=modality.value)
            if declared is not None:
                missing[modality] = declared

        survival = None
        if patient.survival_time is not None:
            if patient.survival_event is None:
                raise DataValidationError("survival_event missing", patient_id=pid, field="survival")
            try:
                survival = SurvivalLabel(time=patient.survival_time, event=patient.survival_event)
            except ValidationError as e:
                raise _wrap(e, pid, "survival")

        try:
            return PatientRecord(
                patient_id=pid,
                patches=patches,
                omics=omics,
                subtype_label=patient.subtype,
                survival=survival,
                split=patient.split,
                missing=missing,
            )
        except ValidationError as e:
            raise _wrap(e, pid, "record")

    @staticmethod
    def _to_transformed(modality: Modality, entry: ModalityEntry, raw: np.ndarray, declared) -> np.ndarray:
        if modality == Modality.DNAM:
            return OmicsTransformService.validate_dnam(raw, entry.num_features)
        if entry.value_space == ValueSpace.TRANSFORMED:
            return raw
        if modality == Modality.RNA:
            return OmicsTransformService.transform_rna(raw)
        return OmicsTransformService.transform_cnv(raw, declared)

    @staticmethod
    def save_cohort(
        cohort: Cohort,
        out_dir: str,
        exclude_chromosomes: Sequence[str] = (),
        variance_split: Optional[CohortSplit] = None,
    ) -> str:
        """Write a cohort (values in transformed space) and return the manifest path."""
        os.makedirs(out_dir, exist_ok=True)
        payloads, patients = [], []
        for record in cohort.records:
            pid = record.patient_id
            slides = OrderedDict()
            for slide_id, row in zip(record.patches.source_slide_ids, record.patches.embeddings):
                slides.setdefault(slide_id, []).append(row)
            slide_paths = []
            for slide_id, rows in slides.items():
                rel = f"patients/{pid}.wsi.{slide_id}.bin"
                payloads.append((rel, np.stack(rows)))
                slide_paths.append(rel)
            entry = {"id": pid, "slides": slide_paths}
            for modality, profile in record.omics.items():
                rel = f"patients/{pid}.{modality.value}.bin"
                payloads.append((rel, profile.values))
                entry[modality.value] = rel
            if Modality.CNV in record.missing:
                rel = f"patients/{pid}.cnv.missing.bin"
                payloads.append((rel, record.missing[Modality.CNV].astype(np.float64)))
                entry["cnv_missing"] = rel
            if record.subtype_label is not None:
                entry["subtype"] = record.subtype_label
            if record.survival is not None:
                entry["survival_time"] = record.survival.time
                entry["survival_event"] = record.survival.event
            if record.split is not None:
                entry["split"] = record.split
            patients.append(PatientEntry(**entry))

        cohort_store.write_payloads(out_dir, payloads, desc=f"Writing {len(cohort)} patients")

        modalities = {}
        for modality, grouping in cohort.groupings.items():
            grouping_rel = f"groups/{modality.value}.tsv"
            cohort_store.write_grouping(os.path.join(out_dir, grouping_rel), grouping)
            features_rel = None
            if modality in cohort.features:
                features_rel = f"features/{modality.value}.tsv"
                cohort_store.write_features(os.path.join(out_dir, features_rel), cohort.features[modality])
            modalities[modality] = ModalityEntry(
                num_features=cohort.feature_counts[modality],
                value_space=ValueSpace.TRANSFORMED,
                grouping=grouping_rel,
                features=features_rel,
            )

        manifest = CohortManifest(
            patch_dim=cohort.patch_dim,
            modalities=modalities,
            exclude_chromosomes=list(exclude_chromosomes),
            variance_split=variance_split,
            patients=patients,
        )
        path = os.path.join(out_dir, MANIFEST_NAME)
        cohort_store.write_manifest(path, manifest)
        logger.info("wrote %d patients to %s", len(cohort), out_dir)
        return path

    @staticmethod
    def require_modalities(cohort: Cohort, modalities: Iterable[Modality]) -> None:
        for record in cohort.records:
            for modality in modalities:
                if not record.has(modality):
                    raise DataValidationError("modality missing", patient_id=record.patient_id, field=modality.value)

    @staticmethod
    def select_split(cohort: Cohort, split: CohortSplit) -> Cohort:
        """Patients of one split; cohorts without split annotations are returned whole."""
        if all(r.split is None for r in cohort.records):
            logger.warning(
                "cohort has no split annotations: all %d patients are used for %s", len(cohort), split.value
            )
            return cohort
        return cohort.subset([r.patient_id for r in cohort.records if r.split == split])

    @staticmethod
    def split_cohort(
        records: Sequence[PatientRecord],
        fraction: float = 0.6,
        stratify_by: Optional[str] = "subtype",
        seed: int = 0,
    ) -> Tuple[List[str], List[str]]:
        """Stratified (pretrain ids, downstream ids)."""
        ids = [r.patient_id for r in records]
        if fraction <= 0:
            return [], ids
        if fraction >= 1:
            return ids, []
        labels = None
        if stratify_by == "subtype" and all(r.subtype_label is not None for r in records):
            labels = [r.subtype_label for r in records]
        try:
            pretrain, downstream = train_test_split(ids, train_size=fraction, stratify=labels, random_state=seed)
        except ValueError:
            logger.warning("stratified split impossible, falling back to an unstratified split")
            pretrain, downstream = train_test_split(ids, train_size=fraction, random_state=seed)
        order = {pid: i for i, pid in enumerate(ids)}
        return sorted(pretrain, key=order.get), sorted(downstream, key=order.get)

    @staticmethod
    def select_features(cohort: Cohort, config: DataConfig) -> Dict[Modality, List[int]]:
        """Feature indices kept per modality, computed on `cohort` (the training split)."""
        selection = {}
        for modality in cohort.groupings:
            carriers = [r for r in cohort.records if modality in r.omics]
            kept = np.arange(cohort.feature_counts[modality])
            if not carriers:
                selection[modality] = kept.tolist()
                continue
            if any(modality in r.missing for r in carriers):
                missing = np.stack([
                    r.missing.get(modality, np.zeros(cohort.feature_counts[modality], dtype=bool)) for r in carriers
                ])
                kept = np.intersect1d(
                    kept, FeatureSelectionService.drop_sparse_features(missing, config.max_missing_fraction)
                )
                if kept.size == 0:
                    raise DataValidationError("every feature exceeds max_missing_fraction", field=modality.value)
            matrix = np.stack([r.omics[modality].values for r in carriers])[:, kept]
            if modality in config.std_threshold:
                threshold = config.std_threshold[modality]
                kept = kept[FeatureSelectionService.select_by_variance(matrix, threshold=threshold)]
                if kept.size == 0:
                    raise ConfigError(
                        f"no feature has std above {threshold}",
                        key_path=f"data.std_threshold.{modality.value}",
                    )
            elif modality in config.variance_keep:
                keep = min(config.variance_keep[modality], kept.size)
                kept = kept[FeatureSelectionService.select_by_variance(matrix, keep=keep)]
            if kept.size == 0:
                raise DataValidationError("feature selection removed every feature", field=modality.value)
            selection[modality] = kept.tolist()
        return selection

    @staticmethod
    def apply_selection(
        cohort: Cohort,
        selection: Dict[Modality, List[int]],
        groupings: Optional[Dict[Modality, GroupingScheme]] = None,
        num_clusters: Optional[Dict[Modality, int]] = None,
    ) -> Cohort:
        """
        Restrict every profile to the selected features.

        Groupings come from `groupings` when given (e.g. restored from a checkpoint);
        otherwise they are re-indexed, or re-clustered by genomic position for
        modalities listed in `num_clusters`.
        """
        num_clusters = num_clusters or {}
        new_groupings, features, counts = {}, {}, {}
        for modality, grouping in cohort.groupings.items():
            kept = selection.get(modality, list(range(cohort.feature_counts[modality])))
            if kept and max(kept) >= cohort.feature_counts[modality]:
                raise DataValidationError(
                    f"feature selection reaches index {max(kept)}, "
                    f"cohort has {cohort.feature_counts[modality]} features",
                    field=modality.value,
                )
            counts[modality] = len(kept)
            if modality in cohort.features:
                features[modality] = cohort.features[modality].take(kept)
            if groupings is not None and modality in groupings:
                new_groupings[modality] = groupings[modality]
            elif modality in num_clusters and modality in features:
                table = features[modality]
                try:
                    new_groupings[modality] = cluster_by_position(
                        table.chromosomes, table.positions, num_clusters[modality], modality
                    )
                except ValueError as e:
                    raise ConfigError(str(e), key_path=f"data.num_clusters.{modality.value}")
            else:
                new_groupings[modality] = restrict_grouping(grouping, kept)
            if new_groupings[modality].num_features != len(kept):
                raise DataValidationError(
                    f"grouping covers {new_groupings[modality].num_features} features, selection keeps {len(kept)}",
                    field=f"{modality.value} grouping",
                )

        records = []
        for record in cohort.records:
            omics = {
                m: OmicsProfile(modality=m, values=p.values[selection[m]], transformed=True) if m in selection else p
                for m, p in record.omics.items()
            }
            missing = {m: v[selection[m]] if m in selection else v for m, v in record.missing.items()}
            records.append(record.model_copy(update={"omics": omics, "missing": missing}))
        return cohort.model_copy(update={
            "records": records,
            "groupings": new_groupings,
            "feature_counts": counts,
            "features": features,
        })

    @staticmethod
    def prepare_cohort(
        path: str,
        config: DataConfig,
        split: Optional[CohortSplit] = None,
        selection: Optional[Dict[Modality, List[int]]] = None,
        groupings: Optional[Dict[Modality, GroupingScheme]] = None,
    ) -> Tuple[Cohort, Dict[Modality, List[int]]]:
        """
        Load a cohort (manifest file or its directory), keep one split and restrict it to
        a feature selection. Without `selection` one is computed on the loaded split.
        """
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        cohort = CohortService.load_cohort(path)
        if split is not None and config.use_split:
            cohort = CohortService.select_split(cohort, split)
        if len(cohort) == 0:
            raise DataValidationError("no patients to use", field=path)
        if selection is None:
            selection = CohortService.select_features(cohort, config)
        cohort = CohortService.apply_selection(cohort, selection, groupings, config.num_clusters)
        return cohort, selection
