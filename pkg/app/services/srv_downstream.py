"""
Fine-tuning heads on the <cls> representation: few-shot subtyping and
discrete-time survival, with their metrics and harnesses.
"""

import logging
import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from more_itertools import chunked
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import KFold, StratifiedKFold
from torch import nn
from tqdm import tqdm

from app.core.nn import set_dropout
from app.core.optim import LrSchedule, OptimizerState, adamw_step
from app.core.seeding import SeedStreams
from app.helpers.enums import FinetuneScope, Modality
from app.helpers.exception_handler import DataValidationError, NumericError
from app.helpers.paging import iter_pages
from app.schemas.sche_cohort import Cohort, PatientRecord
from app.schemas.sche_report import FewShotResult, SurvivalCVResult
from app.schemas.sche_run import SubtypeConfig, SurvivalConfig
from app.services.srv_model import MorpheusModel, build_batch
from app.services.srv_survival import DiscretizationRule, concordance_index, hazard_nll, risk_score, survival_curve

logger = logging.getLogger(__name__)

# (run or fold index) -> freshly initialised or checkpoint-restored backbone
BackboneFactory = Callable[[int], MorpheusModel]


class SubtypeHead(nn.Linear):
    def __init__(self, d: int, num_classes: int):
        super().__init__(d, num_classes)


class SurvivalHead(nn.Linear):
    def __init__(self, d: int, num_intervals: int):
        if num_intervals < 2:
            raise ValueError("survival head needs at least two intervals")
        super().__init__(d, num_intervals)


class DownstreamModel(nn.Module):
    """Backbone <cls> output (with the given omics fully visible) followed by a linear head."""

    def __init__(self, backbone: MorpheusModel, head: nn.Module, visible: Iterable[Modality] = ()):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.visible = [m for m in Modality.omics() if m in set(visible)]

    def forward(self, batch) -> torch.Tensor:
        return self.head(self.backbone.cls_embedding(batch, self.visible))

    def trainable_parameters(self, scope: FinetuneScope) -> Dict[str, nn.Parameter]:
        if scope == FinetuneScope.HISTO:
            prefixes = ("backbone.histo.", "head.")
            return {n: p for n, p in self.named_parameters() if n.startswith(prefixes)}
        return {n: p for n, p in self.named_parameters() if not n.startswith("backbone.decoders.")}


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("one label is required per score")
    if labels.all() or not labels.any():
        raise ValueError("AUC needs both classes")
    return float(roc_auc_score(labels, scores))


def multiclass_auc(probabilities: np.ndarray, labels: Sequence[int]) -> float:
    """Binary AUC on the positive-class column, one-vs-rest macro average otherwise."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probabilities.shape[1] == 2:
        return auc(probabilities[:, 1], labels == 1)
    present = np.unique(labels)
    if present.size < 2:
        raise ValueError("AUC needs at least two classes")
    if present.size == probabilities.shape[1]:
        return float(roc_auc_score(labels, probabilities, multi_class="ovr", average="macro"))
    # classes absent from the evaluation set have no one-vs-rest curve
    return float(np.mean([auc(probabilities[:, c], labels == c) for c in present]))


def require_visible(records: Sequence[PatientRecord], visible: Iterable[Modality]) -> None:
    for record in records:
        for modality in visible:
            if modality not in record.omics:
                raise DataValidationError(
                    "modality requested for fine-tuning is missing", patient_id=record.patient_id, field=modality.value
                )


def fine_tune(
    model: DownstreamModel,
    records: Sequence[PatientRecord],
    loss_fn: Callable[[torch.Tensor, Sequence[PatientRecord]], torch.Tensor],
    schedule: LrSchedule,
    epochs: int,
    batch_size: int,
    weight_decay: float,
    scope: FinetuneScope,
    feature_counts: Dict[Modality, int],
    patch_sample: int,
    streams: SeedStreams,
    key: Tuple[int, ...],
    desc: Optional[str] = None,
) -> DownstreamModel:
    """Train the scoped parameters; shuffle/patch draws use ("data", *key, epoch)."""
    params = model.trainable_parameters(scope)
    for name, param in model.named_parameters():
        param.requires_grad_(name in params)
    optimizer = OptimizerState(params.items(), weight_decay, lr=schedule.lr(0))
    num_batches = max(1, math.ceil(len(records) / batch_size))
    for epoch in tqdm(range(epochs), desc=desc, disable=desc is None):
        rng = streams.numpy("data", *key, epoch)
        streams.seed_global_torch("dropout", *key, epoch)
        model.train()
        for b, chunk in enumerate(chunked(rng.permutation(len(records)), batch_size)):
            batch_records = [records[i] for i in chunk]
            batch = build_batch(batch_records, feature_counts, patch_sample, rng)
            optimizer.zero_grad()
            loss = loss_fn(model(batch), batch_records)
            if not torch.isfinite(loss):
                raise NumericError("non-finite fine-tuning loss", {"epoch": epoch, "batch": b})
            loss.backward()
            adamw_step(optimizer, params, schedule.lr(epoch + b / num_batches))
    model.eval()
    return model


@torch.no_grad()
def predict(model: DownstreamModel, records: Sequence[PatientRecord], feature_counts: Dict[Modality, int],
            batch_size: int = 32) -> torch.Tensor:
    """Head outputs for every record, using all of its patches."""
    model.eval()
    outputs = [model(build_batch(page, feature_counts)) for page in iter_pages(list(records), batch_size)]
    return torch.cat(outputs, dim=0)


def _class_index(cohort: Cohort) -> Tuple[List[str], np.ndarray]:
    labels = [r.subtype_label for r in cohort.records]
    if any(label is None for label in labels):
        missing = next(r.patient_id for r in cohort.records if r.subtype_label is None)
        raise DataValidationError("subtype label missing", patient_id=missing, field="subtype")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise DataValidationError(f"subtyping needs at least two classes, got {classes}", field="subtype")
    return classes, np.array([classes.index(label) for label in labels])


def few_shot_protocol(
    backbone_factory: BackboneFactory,
    cohort: Cohort,
    config: SubtypeConfig,
    seed: int,
    patch_sample: int,
) -> FewShotResult:
    """
    Per run: draw k patients per class for training, fine-tune backbone + head,
    and score the AUC on every remaining patient.
    """
    classes, y = _class_index(cohort)
    counts = np.bincount(y, minlength=len(classes))
    if np.any(counts <= config.k):
        short = [c for c, n in zip(classes, counts) if n <= config.k]
        raise DataValidationError(f"classes {short} have at most k={config.k} patients", field="subtype")
    require_visible(cohort.records, config.visible)

    streams = SeedStreams(seed)
    aucs = []
    for run in range(config.runs):
        rng = streams.numpy("data", 2, run)
        train_idx = np.sort(np.concatenate([
            rng.choice(np.flatnonzero(y == c), size=config.k, replace=False) for c in range(len(classes))
        ]))
        test_idx = np.setdiff1d(np.arange(len(cohort)), train_idx)

        backbone = backbone_factory(run)
        torch.manual_seed(streams.torch_seed("init", 1, run))
        model = DownstreamModel(backbone, SubtypeHead(backbone.config.d, len(classes)), config.visible)
        set_dropout(model, config.dropout)
        label_of = {cohort.records[i].patient_id: int(y[i]) for i in train_idx}

        def loss_fn(logits, batch_records):
            target = torch.as_tensor([label_of[r.patient_id] for r in batch_records])
            return F.cross_entropy(logits, target)

        fine_tune(
            model, [cohort.records[i] for i in train_idx], loss_fn, config.schedule(), config.epochs,
            config.batch_size, config.weight_decay, config.finetune_scope, cohort.feature_counts,
            patch_sample, streams, (3, run),
        )
        probabilities = torch.softmax(predict(model, [cohort.records[i] for i in test_idx], cohort.feature_counts), -1)
        aucs.append(multiclass_auc(probabilities.numpy(), y[test_idx]))
        logger.info("few-shot run=%d k=%d auc=%.6f", run, config.k, aucs[-1])

    return FewShotResult(
        aucs=aucs,
        mean=float(np.mean(aucs)),
        std=float(np.std(aucs)),
        k=config.k,
        seed=seed,
    )


def _folds(events: np.ndarray, folds: int, seed: int):
    try:
        return list(StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed).split(events, events))
    except ValueError:
        logger.warning("event-stratified folds impossible, using plain k-fold")
        return list(KFold(n_splits=folds, shuffle=True, random_state=seed).split(events))


def survival_cv(
    backbone_factory: BackboneFactory,
    cohort: Cohort,
    config: SurvivalConfig,
    seed: int,
    patch_sample: int,
) -> Tuple[SurvivalCVResult, pd.DataFrame]:
    """
    k-fold fine-tuning with the discrete-time hazard loss.

    Returns the per-fold C-index summary (folds without comparable pairs are
    undefined and left out of the mean) and the held-out predictions: risk score and
    survival curve per patient.
    """
    missing = [r.patient_id for r in cohort.records if r.survival is None]
    if missing:
        raise DataValidationError("survival label missing", patient_id=missing[0], field="survival")
    if len(cohort) < config.folds:
        raise DataValidationError(f"{len(cohort)} patients cannot fill {config.folds} folds", field="survival")
    require_visible(cohort.records, config.visible)

    streams = SeedStreams(seed)
    events = np.array([r.survival.event for r in cohort.records], dtype=np.int64)
    c_indices, predictions = [], []
    for fold, (train_idx, test_idx) in enumerate(_folds(events, config.folds, seed)):
        train = [cohort.records[i] for i in train_idx]
        test = [cohort.records[i] for i in test_idx]
        rule = DiscretizationRule.from_times([r.survival.time for r in train], config.num_intervals)

        backbone = backbone_factory(fold)
        torch.manual_seed(streams.torch_seed("init", 2, fold))
        model = DownstreamModel(backbone, SurvivalHead(backbone.config.d, config.num_intervals), config.visible)
        set_dropout(model, config.dropout)

        def loss_fn(logits, batch_records):
            return hazard_nll(logits, [r.survival for r in batch_records], rule)

        fine_tune(
            model, train, loss_fn, config.schedule(), config.epochs, config.batch_size, config.weight_decay,
            config.finetune_scope, cohort.feature_counts, patch_sample, streams, (4, fold),
        )
        logits = predict(model, test, cohort.feature_counts)
        risks = risk_score(logits).numpy()
        curves = survival_curve(logits).numpy()
        c = concordance_index(risks, [r.survival for r in test])
        if c is None:
            logger.warning("fold %d has no comparable pair; C-index undefined", fold)
        else:
            logger.info("survival fold=%d c_index=%.6f", fold, c)
        c_indices.append(c)
        for record, risk, curve in zip(test, risks, curves):
            row = {"patient_id": record.patient_id, "fold": fold, "risk": float(risk)}
            row.update({f"survival_{q + 1}": float(s) for q, s in enumerate(curve)})
            predictions.append(row)

    defined = [c for c in c_indices if c is not None]
    result = SurvivalCVResult(
        c_indices=c_indices,
        mean=float(np.mean(defined)) if defined else None,
        std=float(np.std(defined)) if defined else None,
        seed=seed,
    )
    return result, pd.DataFrame(predictions)
