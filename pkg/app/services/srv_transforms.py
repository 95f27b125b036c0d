"""
Omics preprocessing: value transforms, feature selection and genomic-location grouping.
"""

import logging
import re
from typing import Iterable, List, Optional, Sequence

import numpy as np

from app.helpers.enums import Modality
from app.schemas.sche_cohort import GroupingScheme

logger = logging.getLogger(__name__)

CNV_DIPLOID = 2.0
SEX_CHROMOSOMES = ("X", "Y")


def normalise_chromosome(name: str) -> str:
    name = str(name).strip()
    return re.sub(r"^chr", "", name, flags=re.IGNORECASE).upper()


def chromosome_sort_key(name: str):
    """Natural order: 1, 2, ..., 22, then X, Y, M and anything else alphabetically."""
    name = normalise_chromosome(name)
    if name.isdigit():
        return 0, int(name), ""
    return 1, 0, name


class OmicsTransformService(object):

    @staticmethod
    def transform_rna(raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        negative = np.flatnonzero(raw < 0)
        if negative.size:
            raise ValueError(f"negative expression {raw[negative[0]]} at index {negative[0]}")
        return np.log2(raw + 1.0)

    @staticmethod
    def transform_cnv(raw: np.ndarray, missing: Optional[np.ndarray] = None) -> np.ndarray:
        """Impute declared-missing entries to the diploid value, then log10(x / 2 + 1)."""
        values = np.array(raw, dtype=np.float64)
        if missing is not None:
            missing = np.asarray(missing, dtype=bool)
            if missing.shape != values.shape:
                raise ValueError("missing mask does not match the copy-number vector")
            values[missing] = CNV_DIPLOID
        negative = np.flatnonzero(values < 0)
        if negative.size:
            raise ValueError(f"negative copy number {values[negative[0]]} at index {negative[0]}")
        return np.log10(values / 2.0 + 1.0)

    @staticmethod
    def validate_dnam(raw: np.ndarray, expected_length: Optional[int] = None) -> np.ndarray:
        values = np.asarray(raw, dtype=np.float64)
        if values.size == 0 or (expected_length is not None and values.size != expected_length):
            raise ValueError(f"length mismatch: got {values.size} beta values, expected {expected_length}")
        bad = np.flatnonzero(~((values >= 0.0) & (values <= 1.0)))
        if bad.size:
            raise ValueError(f"beta value {values[bad[0]]} at index {bad[0]} outside [0, 1]")
        return values


class FeatureSelectionService(object):

    @staticmethod
    def select_by_variance(
        matrix: np.ndarray,
        keep: Optional[int] = None,
        threshold: Optional[float] = None,
    ) -> List[int]:
        """
        Most variable features of a cohort x features matrix.

        Args:
            matrix: cohort x features values
            keep: number of features to keep (highest std first, ties by lower index)
            threshold: alternative mode, keep every feature with std > threshold

        Returns:
            ascending feature indices
        """
        matrix = np.asarray(matrix, dtype=np.float64)
        if (keep is None) == (threshold is None):
            raise ValueError("exactly one of keep and threshold is required")
        ddof = 1 if matrix.shape[0] > 1 else 0
        std = matrix.std(axis=0, ddof=ddof)
        if threshold is not None:
            return np.flatnonzero(std > threshold).tolist()
        if keep <= 0:
            raise ValueError("keep must be positive")
        if keep > std.size:
            raise ValueError(f"keep={keep} exceeds the {std.size} available features")
        order = np.lexsort((np.arange(std.size), -std))
        return sorted(order[:keep].tolist())

    @staticmethod
    def drop_sparse_features(missing_mask: np.ndarray, max_missing_fraction: float = 0.99) -> List[int]:
        missing_mask = np.asarray(missing_mask, dtype=bool)
        fraction = missing_mask.mean(axis=0)
        return np.flatnonzero(fraction <= max_missing_fraction).tolist()

    @staticmethod
    def exclude_chromosomes(chromosomes: Sequence[str], excluded: Iterable[str] = SEX_CHROMOSOMES) -> List[int]:
        excluded = {normalise_chromosome(c) for c in excluded}
        return [i for i, c in enumerate(chromosomes) if normalise_chromosome(c) not in excluded]


def _apportion(sizes: List[int], num_clusters: int) -> List[int]:
    """Largest-remainder allocation with at least one cluster per chromosome."""
    total = sum(sizes)
    quotas = [num_clusters * n / total for n in sizes]
    alloc = [min(n, max(1, int(np.floor(q)))) for n, q in zip(sizes, quotas)]
    while sum(alloc) < num_clusters:
        candidates = [i for i, (a, n) in enumerate(zip(alloc, sizes)) if a < n]
        best = max(candidates, key=lambda i: (quotas[i] - alloc[i], -i))
        alloc[best] += 1
    while sum(alloc) > num_clusters:
        candidates = [i for i, a in enumerate(alloc) if a > 1]
        worst = min(candidates, key=lambda i: (quotas[i] - alloc[i], -i))
        alloc[worst] -= 1
    return alloc


def cluster_by_position(
    chromosomes: Sequence[str],
    positions: Sequence[int],
    num_clusters: int,
    modality: Modality = Modality.DNAM,
) -> GroupingScheme:
    """
    Group features by genomic location into clusters of roughly equal size.

    Clusters are apportioned to chromosomes by feature count (largest remainder,
    at least one each); inside a chromosome the position-sorted features are cut
    into contiguous runs whose sizes differ by at most one. With fewer clusters
    than chromosomes the genome-ordered features are cut into contiguous runs instead.
    """
    positions = np.asarray(positions, dtype=np.int64)
    num_features = len(chromosomes)
    if len(positions) != num_features:
        raise ValueError("chromosomes and positions differ in length")
    if num_clusters < 1:
        raise ValueError("num_clusters must be positive")
    if num_clusters > num_features:
        raise ValueError(f"num_clusters={num_clusters} exceeds the {num_features} features")

    names = sorted({normalise_chromosome(c) for c in chromosomes}, key=chromosome_sort_key)
    members = {name: [] for name in names}
    for idx, chrom in enumerate(chromosomes):
        members[normalise_chromosome(chrom)].append(idx)
    for name in names:
        members[name].sort(key=lambda i: (positions[i], i))

    groups, labels = [], []
    if num_clusters < len(names):
        logger.warning(
            "%d clusters for %d chromosomes: falling back to genome-order runs", num_clusters, len(names)
        )
        genome_order = [i for name in names for i in members[name]]
        for j, run in enumerate(np.array_split(np.asarray(genome_order), num_clusters)):
            groups.append(run)
            labels.append(f"run_{j}")
    else:
        alloc = _apportion([len(members[name]) for name in names], num_clusters)
        for name, count in zip(names, alloc):
            for j, run in enumerate(np.array_split(np.asarray(members[name]), count)):
                groups.append(run)
                labels.append(f"chr{name}_{j}")

    return GroupingScheme(modality=modality, group_indices=groups, group_names=labels, num_features=num_features)


def contiguous_groups(num_features: int, num_groups: int, modality: Modality) -> GroupingScheme:
    runs = np.array_split(np.arange(num_features), num_groups)
    return GroupingScheme(
        modality=modality,
        group_indices=runs,
        group_names=[f"{modality.value}_{k}" for k in range(num_groups)],
        num_features=num_features,
    )


def restrict_grouping(grouping: GroupingScheme, kept: Sequence[int]) -> GroupingScheme:
    """Re-index a (possibly overlapping) grouping onto a retained feature subset; empty groups are dropped."""
    remap = {int(old): new for new, old in enumerate(kept)}
    groups, names = [], []
    for name, group in zip(grouping.group_names, grouping.group_indices):
        retained = [remap[int(i)] for i in group if int(i) in remap]
        if retained:
            groups.append(np.asarray(retained))
            names.append(name)
        else:
            logger.info("group %s has no retained feature and is dropped", name)
    return GroupingScheme(modality=grouping.modality, group_indices=groups, group_names=names, num_features=len(kept))
