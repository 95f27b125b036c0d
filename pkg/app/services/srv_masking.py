import logging
import math
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from app.helpers.enums import Modality
from app.helpers.exception_handler import MaskingError
from app.schemas.sche_mask import MaskPlan

logger = logging.getLogger(__name__)

FLOOR_SLACK = 1e-9


def largest_remainder(quotas: Sequence[float], total: int) -> np.ndarray:
    """Integers with the given sum closest to `quotas`; remainders break ties by lower index."""
    quotas = np.asarray(quotas, dtype=np.float64)
    base = np.floor(quotas).astype(np.int64)
    short = int(total - base.sum())
    if short > 0:
        order = np.lexsort((np.arange(quotas.size), -(quotas - base)))
        base[order[:short]] += 1
    return base


def visible_budget(ratio: float, total_tokens: int) -> int:
    return int(math.floor((1.0 - ratio) * total_tokens + FLOOR_SLACK))


class MaskingService(object):

    @staticmethod
    def budgets(weights: Sequence[float], visible_total: int, counts: Sequence[int]) -> np.ndarray:
        """
        Per-modality visible counts: largest-remainder rounding of weights * visible_total,
        clamped to each modality's token count, with the overflow handed to modalities
        with spare capacity in proportion to that capacity.
        """
        counts = np.asarray(counts, dtype=np.int64)
        if visible_total > counts.sum():
            raise MaskingError(f"visible budget {visible_total} exceeds the {int(counts.sum())} omics tokens")
        budget = largest_remainder(np.asarray(weights) * visible_total, visible_total)
        overflow = int(np.maximum(budget - counts, 0).sum())
        budget = np.minimum(budget, counts)
        while overflow > 0:
            capacity = counts - budget
            share = largest_remainder(overflow * capacity / capacity.sum(), overflow)
            granted = np.minimum(share, capacity)
            budget += granted
            overflow -= int(granted.sum())
        return budget

    @staticmethod
    def sample_mask_plan(
        token_counts: Dict[Modality, int],
        ratio: float,
        alpha: float,
        rng: np.random.Generator,
        weights: Optional[Sequence[float]] = None,
    ) -> MaskPlan:
        """
        Draw a pretraining mask plan.

        Args:
            token_counts: omics token count per modality
            ratio: global masking ratio r in [0, 1]
            alpha: Dirichlet concentration (> 0)
            rng: numpy generator (mask stream)
            weights: fixed modality weights instead of a Dirichlet draw

        Returns:
            MaskPlan with exactly floor((1 - r) * L) visible tokens
        """
        if not 0.0 <= ratio <= 1.0:
            raise MaskingError(f"masking ratio {ratio} outside [0, 1]")
        if not alpha > 0:
            raise MaskingError(f"Dirichlet concentration {alpha} must be positive")
        modalities = [m for m in Modality.omics() if m in token_counts]
        counts = [int(token_counts[m]) for m in modalities]

        if weights is None:
            draws = rng.gamma(alpha, 1.0, size=len(modalities))
            total = draws.sum()
            weights = draws / total if total > 0 else np.full(len(modalities), 1.0 / len(modalities))
        weights = np.asarray(weights, dtype=np.float64)
        if weights.size != len(modalities):
            raise MaskingError("one weight is required per modality")

        visible_total = visible_budget(ratio, sum(counts))
        budget = MaskingService.budgets(weights, visible_total, counts)

        visible = {}
        for modality, count, n_visible in zip(modalities, counts, budget):
            flags = np.zeros(count, dtype=bool)
            flags[rng.choice(count, size=int(n_visible), replace=False)] = True
            visible[modality] = flags
        return MaskPlan(visible=visible, ratio=ratio, weights=tuple(float(w) for w in weights))

    @staticmethod
    def explicit_mask_plan(
        visible_modalities: Iterable[Modality],
        target_modalities: Iterable[Modality],
        token_counts: Dict[Modality, int],
    ) -> MaskPlan:
        """Fully visible inputs, fully masked targets and unlisted omics modalities."""
        visible_set = {m for m in visible_modalities if m != Modality.WSI}
        target_set = set(target_modalities)
        overlap = visible_set & target_set
        if overlap:
            raise MaskingError(f"modalities both visible and targeted: {sorted(m.value for m in overlap)}")
        unknown = (visible_set | target_set) - set(token_counts)
        if unknown:
            raise MaskingError(f"modalities without tokens: {sorted(m.value for m in unknown)}")

        modalities = [m for m in Modality.omics() if m in token_counts]
        visible = {m: np.full(int(token_counts[m]), m in visible_set, dtype=bool) for m in modalities}
        n_visible = np.array([visible[m].sum() for m in modalities], dtype=np.float64)
        total = int(sum(token_counts[m] for m in modalities))
        if n_visible.sum() > 0:
            weights = n_visible / n_visible.sum()
        else:
            weights = np.full(len(modalities), 1.0 / len(modalities))
        ratio = 1.0 - n_visible.sum() / total if total else 1.0
        return MaskPlan(visible=visible, ratio=ratio, weights=tuple(float(w) for w in weights))
