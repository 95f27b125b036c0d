"""
Masked multimodal pre-training loop with periodic checkpoints and exact resume.
"""

import json
import logging
import math
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from more_itertools import chunked
from tqdm import tqdm

from app.core.config import settings
from app.core.optim import LrSchedule, OptimizerState, adamw_step
from app.core.seeding import SeedStreams
from app.db.checkpoint import load_checkpoint, save_checkpoint
from app.helpers.enums import Modality
from app.helpers.exception_handler import DataValidationError, MaskingError, NumericError
from app.schemas.sche_cohort import Cohort
from app.schemas.sche_mask import MaskPlan
from app.schemas.sche_model import ModelConfig
from app.schemas.sche_report import EpochRecord
from app.schemas.sche_run import PretrainConfig
from app.services.srv_cohort import CohortService
from app.services.srv_masking import MaskingService
from app.services.srv_model import ModelBatch, ModelService, MorpheusModel, build_batch

logger = logging.getLogger(__name__)

MASK_LOG_NAME = "mask_plans.log"


def build_model(config: ModelConfig, cohort: Cohort, seed: int) -> MorpheusModel:
    config = config.model_copy(update={"patch_dim": cohort.patch_dim})
    return ModelService.build_model(config, cohort.groupings, SeedStreams(seed).torch_seed("init", 0))


def pretrain_step(
    model: MorpheusModel,
    optimizer: OptimizerState,
    batch: ModelBatch,
    plans: Sequence[MaskPlan],
    lr: float,
) -> Tuple[float, Dict[str, float]]:
    """One forward/backward/AdamW update; returns the loss and its per-modality breakdown."""
    model.train()
    optimizer.zero_grad()
    loss, breakdown = model.pretrain_loss(batch, plans)
    if not torch.isfinite(loss):
        raise NumericError("non-finite pre-training loss", {
            m.value: float(v.detach()) for m, v in breakdown.items()
        })
    loss.backward()
    adamw_step(optimizer, optimizer.params, lr)
    return float(loss.detach()), {m.value: float(v.detach()) for m, v in breakdown.items()}


class PretrainService(object):
    def __init__(
        self,
        model_config: ModelConfig,
        config: PretrainConfig,
        seed: int,
        out_dir: str,
        feature_selection: Optional[Dict[Modality, List[int]]] = None,
    ):
        self.model_config = model_config
        self.config = config
        self.streams = SeedStreams(seed)
        self.seed = seed
        self.out_dir = out_dir
        self.feature_selection = feature_selection or {}
        self.schedule: LrSchedule = config.schedule()
        self.step_losses: List[float] = []

    @property
    def checkpoint_path(self) -> str:
        return os.path.join(self.out_dir, settings.CHECKPOINT_NAME)

    def _save(self, model: MorpheusModel, optimizer: OptimizerState, epoch: int, history: List[EpochRecord],
              path: Optional[str] = None) -> str:
        return save_checkpoint(
            path or self.checkpoint_path,
            dict(model.named_parameters()),
            model.config,
            {m: model.tokenizers[m.value].grouping for m in model.modalities},
            feature_selection=self.feature_selection,
            optimizer=optimizer,
            rng={"root_seed": self.seed, "epoch": epoch},
            extra={"epoch": epoch, "history": [h.model_dump() for h in history]},
        )

    def _write_log(self, history: List[EpochRecord]) -> None:
        with open(os.path.join(self.out_dir, settings.TRAIN_LOG_NAME), "w") as fh:
            for record in history:
                fh.write(json.dumps(record.model_dump(), sort_keys=True) + "\n")

    def _resume(self, model: MorpheusModel, optimizer: OptimizerState, path: str) -> Tuple[int, List[EpochRecord]]:
        data = load_checkpoint(path)
        if data.rng.get("root_seed") != self.seed:
            logger.warning("resuming with seed %s, checkpoint was written with %s", self.seed, data.rng.get("root_seed"))
        model.load_state_dict(data.tensors, strict=True)
        optimizer.restore(data.optimizer_moments, data.optimizer_steps, data.step_count, data.lr)
        history = [EpochRecord(**h) for h in data.extra.get("history", [])]
        epoch = int(data.extra.get("epoch", len(history)))
        logger.info("resumed from %s at epoch %d (step %d)", path, epoch, optimizer.step_count)
        return epoch, history

    def _plans(self, model: MorpheusModel, size: int, rng: np.random.Generator) -> List[MaskPlan]:
        return [
            MaskingService.sample_mask_plan(
                model.token_counts, self.model_config.mask_ratio, self.model_config.alpha, rng
            )
            for _ in range(size)
        ]

    def train(self, cohort: Cohort) -> Tuple[MorpheusModel, List[EpochRecord]]:
        """
        Pre-train on every patient of `cohort` (all modalities required).

        Epoch e draws its patient order and patch samples from ("data", 1, e), its mask
        plans from ("mask", e) and reseeds dropout from ("dropout", e), so a resumed
        run continues bit-identically without stored generator state.
        """
        CohortService.require_modalities(cohort, self.model_config.modalities)
        if len(cohort) == 0:
            raise DataValidationError("no pre-training patients")
        os.makedirs(self.out_dir, exist_ok=True)

        model = build_model(self.model_config, cohort, self.seed)
        optimizer = OptimizerState(model.named_parameters(), self.config.weight_decay, lr=self.schedule.lr(0))
        start, history = 0, []
        if self.config.resume:
            start, history = self._resume(model, optimizer, self.config.resume)

        records = cohort.records
        num_batches = math.ceil(len(records) / self.config.batch_size)
        mask_log = open(os.path.join(self.out_dir, MASK_LOG_NAME), "a") if self.config.log_mask_plans else None
        try:
            for epoch in tqdm(range(start, self.config.epochs), desc="Pre-training", initial=start,
                              total=self.config.epochs):
                data_rng = self.streams.numpy("data", 1, epoch)
                mask_rng = self.streams.numpy("mask", epoch)
                self.streams.seed_global_torch("dropout", epoch)
                order = data_rng.permutation(len(records))

                losses, per_modality = [], {}
                for b, chunk in enumerate(chunked(order, self.config.batch_size)):
                    batch_records = [records[i] for i in chunk]
                    batch = build_batch(batch_records, cohort.feature_counts, self.model_config.patch_sample, data_rng)
                    plans = self._plans(model, len(batch_records), mask_rng)
                    if mask_log is not None:
                        for pid, plan in zip(batch.patient_ids, plans):
                            mask_log.write(f"epoch={epoch} batch={b} patient={pid} {plan.to_bitmask_line()}\n")
                    lr = self.schedule.lr(epoch + b / num_batches)
                    try:
                        loss, breakdown = pretrain_step(model, optimizer, batch, plans, lr)
                    except MaskingError as e:
                        logger.warning("epoch %d batch %d rejected: %s", epoch, b, e.message)
                        continue
                    self.step_losses.append(loss)
                    losses.append(loss)
                    for name, value in breakdown.items():
                        per_modality.setdefault(name, []).append(value)

                record = EpochRecord(
                    epoch=epoch,
                    step=optimizer.step_count,
                    lr=optimizer.lr,
                    loss=float(np.mean(losses)) if losses else float("nan"),
                    modality_losses={k: float(np.mean(v)) for k, v in per_modality.items()},
                )
                history.append(record)
                logger.info(
                    "epoch=%d lr=%.6g loss=%.6f %s", epoch, record.lr, record.loss,
                    " ".join(f"{k}={v:.6f}" for k, v in record.modality_losses.items()),
                )
                self._write_log(history)
                done = epoch + 1
                if self.config.checkpoint_every and done % self.config.checkpoint_every == 0 and done < self.config.epochs:
                    self._save(model, optimizer, done, history)
        finally:
            if mask_log is not None:
                mask_log.close()

        path = self._save(model, optimizer, self.config.epochs, history)
        self.verify_checkpoint(model, path)
        return model, history

    @staticmethod
    def verify_checkpoint(model: MorpheusModel, path: str) -> None:
        """Reload `path` and require every parameter to match bit for bit."""
        tensors = load_checkpoint(path).tensors
        for name, param in model.named_parameters():
            if name not in tensors or not torch.equal(tensors[name], param.detach()):
                raise NumericError("checkpoint reload mismatch", {"parameter": name, "path": path})
        logger.info("checkpoint %s verified (%d tensors)", path, len(tensors))
