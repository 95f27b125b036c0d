"""
Discrete-time survival: interval discretisation, hazard likelihood, risk and C-index.
"""

import logging
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from lifelines.utils import concordance_index as lifelines_concordance
from pydantic import BaseModel, field_validator

from app.schemas.sche_cohort import SurvivalLabel

logger = logging.getLogger(__name__)


class DiscretizationRule(BaseModel):
    """
    Q non-overlapping intervals (t_{q-1}, t_q] with t_0 = 0.

    Edges are quantiles of the observed times (censored included) of the training
    fold; the last edge is the largest training time, so every training time
    falls in exactly one interval.
    """

    edges: Sequence[float]

    @field_validator("edges")
    @classmethod
    def check_edges(cls, v):
        v = [float(e) for e in v]
        if len(v) < 2:
            raise ValueError("at least two intervals are required")
        if v[0] <= 0 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("interval edges must be positive and strictly increasing")
        return v

    @property
    def num_intervals(self) -> int:
        return len(self.edges)

    @classmethod
    def from_times(cls, times: Sequence[float], num_intervals: int) -> "DiscretizationRule":
        times = np.asarray(times, dtype=np.float64)
        if times.size == 0:
            raise ValueError("no survival times to discretise")
        edges = np.quantile(times, np.arange(1, num_intervals + 1) / num_intervals)
        edges[-1] = times.max()
        # ties in the quantiles still have to yield strictly increasing edges
        for q in range(num_intervals):
            floor = edges[q - 1] if q else 0.0
            if edges[q] <= floor:
                edges[q] = np.nextafter(floor, np.inf)
        if edges[-1] < times.max():
            logger.warning("training times beyond the last nudged edge %.6g", edges[-1])
        return cls(edges=edges.tolist())

    def interval(self, time: float) -> int:
        """1-based interval q(i) containing `time`; times past the last edge clamp to Q."""
        q = int(np.searchsorted(np.asarray(self.edges), time, side="left")) + 1
        if q > self.num_intervals:
            logger.warning("survival time %.6g beyond last edge %.6g, clamped to interval %d",
                           time, self.edges[-1], self.num_intervals)
            q = self.num_intervals
        return q

    def intervals(self, labels: Sequence[SurvivalLabel]) -> np.ndarray:
        return np.array([self.interval(label.time) for label in labels], dtype=np.int64)


def hazard_nll(logits: torch.Tensor, labels: Sequence[SurvivalLabel], rule: DiscretizationRule) -> torch.Tensor:
    """
    Batch mean of -[delta * log h_q(i) + sum_{j <= q(i) - delta} log(1 - h_j)], h = sigmoid(logits).
    """
    if logits.dim() != 2 or logits.shape[1] != rule.num_intervals:
        raise ValueError(f"expected logits of shape (batch, {rule.num_intervals}), got {tuple(logits.shape)}")
    if logits.shape[0] != len(labels):
        raise ValueError("one label is required per row of logits")
    q = torch.as_tensor(rule.intervals(labels))
    delta = torch.as_tensor([1 if label.event else 0 for label in labels])
    steps = torch.arange(1, rule.num_intervals + 1).unsqueeze(0)
    log_h = F.logsigmoid(logits)
    log_one_minus_h = F.logsigmoid(-logits)
    survived = (steps <= (q - delta).unsqueeze(1)).to(logits.dtype)
    at_event = ((steps == q.unsqueeze(1)) & (delta.unsqueeze(1) == 1)).to(logits.dtype)
    per_sample = -(at_event * log_h + survived * log_one_minus_h).sum(dim=1)
    return per_sample.mean()


def risk_score(logits: torch.Tensor) -> torch.Tensor:
    """Cumulative hazard proxy sum_q sigmoid(a_q); works on (Q,) or (batch, Q)."""
    return torch.sigmoid(logits).sum(dim=-1)


def survival_curve(logits: torch.Tensor) -> torch.Tensor:
    """S(t_q) = prod_{j <= q} (1 - h_j) per interval."""
    return torch.cumprod(torch.sigmoid(-logits), dim=-1)


def concordance_index(risks: Sequence[float], labels: Sequence[SurvivalLabel]) -> Optional[float]:
    """
    Harrell's C: pairs with T_i < T_j and delta_i = 1 are comparable, concordant when
    risk_i > risk_j, risk ties count 0.5. Returns None when no pair is comparable.
    """
    risks = np.asarray(risks, dtype=np.float64)
    if risks.shape[0] != len(labels):
        raise ValueError("one risk is required per label")
    if len(labels) < 2:
        return None
    times = np.array([label.time for label in labels], dtype=np.float64)
    events = np.array([label.event for label in labels], dtype=bool)
    # lifelines scores are survival-like: higher means longer survival
    try:
        return float(lifelines_concordance(times, -risks, events))
    except ZeroDivisionError:
        return None
