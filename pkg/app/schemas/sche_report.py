from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel

from app.helpers.enums import Modality
from app.schemas.sche_base import ArraySchemaBase


class ReconReport(ArraySchemaBase):
    inputs: List[Modality]
    target: Modality
    feature_ids: List[str]
    pearson: np.ndarray
    excluded: List[str]
    median: Optional[float]
    grid: np.ndarray
    curve: np.ndarray
    num_patients: int

    @property
    def label(self) -> str:
        return "+".join(["wsi"] + [m.value for m in self.inputs]) + "->" + self.target.value


class MetricRow(BaseModel):
    """One tidy result row: (task, fold/run, metric, value, seed)."""

    task: str
    split: str
    metric: str
    value: Optional[float]
    seed: int


class FewShotResult(BaseModel):
    aucs: List[float]
    mean: float
    std: float
    k: int
    seed: int

    def rows(self) -> List[MetricRow]:
        rows = [
            MetricRow(task="subtype", split=f"run{i}", metric="auc", value=auc, seed=self.seed)
            for i, auc in enumerate(self.aucs)
        ]
        rows.append(MetricRow(task="subtype", split="summary", metric="auc_mean", value=self.mean, seed=self.seed))
        rows.append(MetricRow(task="subtype", split="summary", metric="auc_std", value=self.std, seed=self.seed))
        return rows


class SurvivalCVResult(BaseModel):
    c_indices: List[Optional[float]]
    mean: Optional[float]
    std: Optional[float]
    seed: int

    def rows(self) -> List[MetricRow]:
        rows = [
            MetricRow(task="survival", split=f"fold{i}", metric="c_index", value=c, seed=self.seed)
            for i, c in enumerate(self.c_indices)
        ]
        rows.append(MetricRow(task="survival", split="summary", metric="c_index_mean", value=self.mean, seed=self.seed))
        rows.append(MetricRow(task="survival", split="summary", metric="c_index_std", value=self.std, seed=self.seed))
        return rows


class EpochRecord(BaseModel):
    epoch: int
    step: int
    lr: float
    loss: float
    modality_losses: Dict[str, float]
