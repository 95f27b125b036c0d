"""
Evaluation of any-to-any generation: per-feature Pearson, threshold-count curves,
medians and the direction-of-change check on subtype groups.
"""

import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from app.helpers.enums import Modality
from app.helpers.exception_handler import DataValidationError
from app.schemas.sche_cohort import Cohort
from app.schemas.sche_report import ReconReport
from app.schemas.sche_run import ComboConfig
from app.services.srv_model import ModelService

logger = logging.getLogger(__name__)

MIN_PATIENTS = 3
SUMMARY_NAME = "recon_summary.csv"


def default_grid(step: float = 0.05) -> np.ndarray:
    """Thresholds 0, step, ..., 1."""
    return np.round(np.arange(0.0, 1.0 + step / 2, step), 10)


def pearson_per_feature(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """
    Column-wise sample Pearson r. Columns with zero variance (or any non-finite
    value) in either argument are undefined and returned as NaN.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError(f"shape mismatch: predictions {pred.shape}, truth {truth.shape}")
    if pred.shape[0] < MIN_PATIENTS:
        raise ValueError(f"Pearson needs at least {MIN_PATIENTS} patients, got {pred.shape[0]}")
    finite = np.isfinite(pred).all(axis=0) & np.isfinite(truth).all(axis=0)
    varying = (np.ptp(np.where(finite, pred, 0.0), axis=0) > 0) & (np.ptp(np.where(finite, truth, 0.0), axis=0) > 0)
    r = np.full(pred.shape[1], np.nan)
    for j in np.flatnonzero(finite & varying):
        r[j] = stats.pearsonr(pred[:, j], truth[:, j]).statistic
    return r


def threshold_curve(r: np.ndarray, grid: Sequence[float]) -> np.ndarray:
    """Number of defined features with r >= t, per grid value."""
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) < 0):
        raise ValueError("threshold grid must be sorted ascending")
    r = np.asarray(r, dtype=np.float64)
    r = r[np.isfinite(r)]
    return np.array([int((r >= t).sum()) for t in grid], dtype=np.int64)


def significant_features(true_a: np.ndarray, true_b: np.ndarray, level: float = 0.01) -> np.ndarray:
    """Features whose group means differ under Welch's t-test at `level`."""
    if len(true_a) < 2 or len(true_b) < 2:
        raise ValueError("each group needs at least two patients for a two-sample test")
    with np.errstate(invalid="ignore", divide="ignore"):
        _, p = stats.ttest_ind(true_a, true_b, axis=0, equal_var=False)
    p = np.asarray(p)
    return np.flatnonzero(np.isfinite(p) & (p < level))


def direction_accuracy(
    pred_a: np.ndarray,
    pred_b: np.ndarray,
    true_a: np.ndarray,
    true_b: np.ndarray,
    significant: Sequence[int],
) -> Optional[float]:
    """
    Percentage of significant features where sign(mean pred A - mean pred B) matches the
    true sign. Equal predicted means count as wrong. None for an empty feature set.
    """
    if len(pred_a) == 0 or len(pred_b) == 0:
        raise ValueError("both groups must be non-empty")
    significant = np.asarray(significant, dtype=np.int64)
    if significant.size == 0:
        return None
    pred_sign = np.sign(np.mean(pred_a, axis=0) - np.mean(pred_b, axis=0))[significant]
    true_sign = np.sign(np.mean(true_a, axis=0) - np.mean(true_b, axis=0))[significant]
    hits = (pred_sign == true_sign) & (pred_sign != 0)
    return float(100.0 * hits.mean())


def build_report(
    inputs: Sequence[Modality],
    target: Modality,
    pred: np.ndarray,
    truth: np.ndarray,
    feature_ids: Sequence[str],
    grid: np.ndarray,
) -> ReconReport:
    r = pearson_per_feature(pred, truth)
    excluded = [fid for fid, value in zip(feature_ids, r) if not np.isfinite(value)]
    defined = r[np.isfinite(r)]
    return ReconReport(
        inputs=list(inputs),
        target=target,
        feature_ids=list(feature_ids),
        pearson=r,
        excluded=excluded,
        median=float(np.median(defined)) if defined.size else None,
        grid=np.asarray(grid, dtype=np.float64),
        curve=threshold_curve(r, grid),
        num_patients=pred.shape[0],
    )


def feature_ids(cohort: Cohort, modality: Modality) -> List[str]:
    if modality in cohort.features:
        return list(cohort.features[modality].feature_ids)
    return [f"{modality.value}_{i:05d}" for i in range(cohort.feature_counts[modality])]


def check_combos(cohort: Cohort, combos: Sequence[ComboConfig]) -> None:
    for combo in combos:
        for modality in [*combo.inputs, combo.target]:
            if modality not in cohort.feature_counts:
                raise DataValidationError(f"combo {combo.label} needs {modality.value}", field="combos")
            for record in cohort.records:
                if modality not in record.omics:
                    raise DataValidationError(
                        f"combo {combo.label} needs this modality", patient_id=record.patient_id, field=modality.value
                    )


def evaluate_combinations(
    model,
    cohort: Cohort,
    combos: Sequence[ComboConfig],
    grid: Optional[np.ndarray] = None,
    batch_size: int = 32,
) -> Tuple[List[ReconReport], Dict[str, np.ndarray]]:
    """
    Generate every combo's target for the whole cohort and score it.

    Returns the reports plus the generated profiles keyed by combo label.
    """
    grid = default_grid() if grid is None else grid
    if not combos:
        return [], {}
    check_combos(cohort, combos)
    reports, profiles = [], {}
    for combo in combos:
        generated = ModelService.generate(
            model, cohort.records, combo.inputs, [combo.target], cohort.feature_counts, batch_size
        )[combo.target]
        report = build_report(
            combo.inputs, combo.target, generated, cohort.omics_matrix(combo.target),
            feature_ids(cohort, combo.target), grid,
        )
        logger.info("%s: median r=%s over %d features (%d excluded)",
                    combo.label, report.median, len(report.feature_ids) - len(report.excluded), len(report.excluded))
        reports.append(report)
        profiles[combo.label] = generated
    return reports, profiles


def subtype_groups(cohort: Cohort) -> Tuple[np.ndarray, np.ndarray, Tuple[str, str]]:
    """Row indices of the two subtype groups (labels sorted)."""
    labels = [r.subtype_label for r in cohort.records]
    if any(label is None for label in labels):
        raise DataValidationError("direction of change needs a subtype label for every patient", field="subtype")
    classes = sorted(set(labels))
    if len(classes) != 2:
        raise DataValidationError(f"direction of change needs exactly two subtypes, got {classes}", field="subtype")
    labels = np.asarray(labels)
    return np.flatnonzero(labels == classes[0]), np.flatnonzero(labels == classes[1]), (classes[0], classes[1])


def direction_of_change(
    model,
    cohort: Cohort,
    combos: Sequence[ComboConfig],
    level: float = 0.01,
    batch_size: int = 32,
) -> pd.DataFrame:
    """Direction accuracy of each combo's generated profiles between the two subtype groups."""
    idx_a, idx_b, classes = subtype_groups(cohort)
    check_combos(cohort, combos)
    rows = []
    for combo in combos:
        truth = cohort.omics_matrix(combo.target)
        significant = significant_features(truth[idx_a], truth[idx_b], level)
        pred = ModelService.generate(
            model, cohort.records, combo.inputs, [combo.target], cohort.feature_counts, batch_size
        )[combo.target]
        accuracy = direction_accuracy(pred[idx_a], pred[idx_b], truth[idx_a], truth[idx_b], significant)
        if accuracy is None:
            logger.warning("%s: no significant features between subtypes %s", combo.label, classes)
        rows.append({
            "combo": combo.label,
            "groups": f"{classes[0]}|{classes[1]}",
            "significant_features": int(significant.size),
            "direction_accuracy": accuracy,
        })
    return pd.DataFrame(rows, columns=["combo", "groups", "significant_features", "direction_accuracy"])


def combo_slug(report: ReconReport) -> str:
    return report.label.replace("->", "_to_").replace("+", "_")


def write_reports(
    reports: Sequence[ReconReport],
    out_dir: str,
    profiles: Optional[Dict[str, np.ndarray]] = None,
) -> List[str]:
    """
    Per combo: `recon_<combo>.csv` (feature_id, r) and `recon_<combo>.curve.txt`
    (threshold, count); plus `recon_summary.csv` and, when given, the generated
    profiles as `generated_<combo>.csv`.
    """
    os.makedirs(out_dir, exist_ok=True)
    written, summary = [], []
    for report in reports:
        slug = combo_slug(report)
        path = os.path.join(out_dir, f"recon_{slug}.csv")
        pd.DataFrame({"feature_id": report.feature_ids, "r": report.pearson}).to_csv(
            path, index=False, float_format="%.17g", na_rep="NaN"
        )
        written.append(path)

        path = os.path.join(out_dir, f"recon_{slug}.curve.txt")
        with open(path, "w") as fh:
            for t, count in zip(report.grid, report.curve):
                fh.write(f"{t:.2f}\t{int(count)}\n")
        written.append(path)

        if profiles is not None and report.label in profiles:
            path = os.path.join(out_dir, f"generated_{slug}.csv")
            pd.DataFrame(profiles[report.label], columns=report.feature_ids).to_csv(
                path, index=False, float_format="%.17g", na_rep="NaN"
            )
            written.append(path)

        row = {
            "combo": report.label,
            "median": report.median,
            "num_features": len(report.feature_ids) - len(report.excluded),
            "excluded": len(report.excluded),
            "num_patients": report.num_patients,
        }
        row.update({f"count_{t:.2f}": int(c) for t, c in zip(report.grid, report.curve)})
        summary.append(row)

    if reports:
        path = os.path.join(out_dir, SUMMARY_NAME)
        pd.DataFrame(summary).to_csv(path, index=False, float_format="%.17g")
        written.append(path)
    return written
