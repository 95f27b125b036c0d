import numpy as np
import pytest

from app.helpers.enums import Modality
from app.services.srv_transforms import (
    FeatureSelectionService,
    OmicsTransformService,
    cluster_by_position,
    restrict_grouping,
)


class TestValueTransforms:
    def test_rna(self):
        assert np.array_equal(OmicsTransformService.transform_rna(np.array([0.0, 3.0, 1.0])), [0.0, 2.0, 1.0])
        with pytest.raises(ValueError):
            OmicsTransformService.transform_rna(np.array([1.0, -0.5]))

    def test_cnv(self):
        """
            Test the copy-number transform
            Step by step:
            - Transform [missing, 2, 0] with a declared-missing mask on the first entry
            - Expected output:
                . [log10(2), log10(2), 0], the diploid value being exact
        """
        out = OmicsTransformService.transform_cnv(np.array([7.0, 2.0, 0.0]), np.array([True, False, False]))
        assert out[0] == np.log10(2.0)
        assert out[1] == np.log10(2.0)
        assert out[2] == 0.0
        with pytest.raises(ValueError):
            OmicsTransformService.transform_cnv(np.array([-1.0]))

    def test_transforms_are_monotone(self, rng):
        raw = np.sort(rng.uniform(0, 100, 50))
        assert np.all(np.diff(OmicsTransformService.transform_rna(raw)) > 0)
        assert np.all(np.diff(OmicsTransformService.transform_cnv(raw)) > 0)

    def test_dnam(self):
        assert np.array_equal(OmicsTransformService.validate_dnam(np.array([0.0, 0.5, 1.0])), [0.0, 0.5, 1.0])
        with pytest.raises(ValueError, match="index 0"):
            OmicsTransformService.validate_dnam(np.array([1.2]))
        with pytest.raises(ValueError, match="length mismatch"):
            OmicsTransformService.validate_dnam(np.array([]), expected_length=3)


class TestVarianceSelection:
    def test_keep(self):
        matrix = np.array([[1.0, -1.0, 0.5], [1.0, 1.0, -0.5]])
        assert FeatureSelectionService.select_by_variance(matrix, keep=2) == [1, 2]

    def test_constant_matrix_ties_by_index(self):
        assert FeatureSelectionService.select_by_variance(np.ones((4, 3)), keep=1) == [0]

    def test_threshold(self):
        # column stds (ddof=1) 0.1 and 0.2
        matrix = np.array([[0.0, 0.0], [0.1 * np.sqrt(2), 0.2 * np.sqrt(2)]])
        assert FeatureSelectionService.select_by_variance(matrix, threshold=0.15) == [1]

    def test_permutation_equivariance(self, rng):
        matrix = rng.normal(size=(10, 20)) * rng.uniform(0.1, 2.0, 20)
        perm = rng.permutation(20)
        kept = FeatureSelectionService.select_by_variance(matrix, keep=7)
        permuted = FeatureSelectionService.select_by_variance(matrix[:, perm], keep=7)
        assert sorted(perm[permuted].tolist()) == kept

    def test_invalid_keep(self):
        with pytest.raises(ValueError):
            FeatureSelectionService.select_by_variance(np.ones((2, 2)), keep=0)
        with pytest.raises(ValueError):
            FeatureSelectionService.select_by_variance(np.ones((2, 2)), keep=3)

    def test_sparse_and_sex_chromosomes(self):
        missing = np.array([[True, False], [True, False]])
        assert FeatureSelectionService.drop_sparse_features(missing, 0.5) == [1]
        assert FeatureSelectionService.exclude_chromosomes(["1", "chrX", "Y", "2"]) == [0, 3]


class TestClusterByPosition:
    def test_apportionment(self):
        """
            Test cluster apportionment across chromosomes
            Step by step:
            - 10 features on chr1 and 5 on chr2, 3 clusters
            - Expected output:
                . chr1 receives 2 clusters of 5, chr2 a single cluster
        """
        chroms = ["1"] * 10 + ["2"] * 5
        grouping = cluster_by_position(chroms, np.arange(15) * 100, 3)
        assert grouping.group_names == ["chr1_0", "chr1_1", "chr2_0"]
        assert grouping.sizes == [5, 5, 5]

    def test_single_chromosome_even_runs(self, rng):
        positions = rng.permutation(1000)[:23]
        grouping = cluster_by_position(["7"] * 23, positions, 4)
        assert max(grouping.sizes) - min(grouping.sizes) <= 1
        covered = np.concatenate(grouping.group_indices)
        assert sorted(covered.tolist()) == list(range(23))
        # runs are contiguous in position order
        order = np.argsort(positions, kind="stable")
        assert [g.tolist() for g in grouping.group_indices] == [
            sorted(run.tolist()) for run in np.array_split(order, 4)
        ]

    def test_singletons(self):
        grouping = cluster_by_position(["1", "1", "1"], [30, 10, 20], 3)
        assert [g.tolist() for g in grouping.group_indices] == [[1], [2], [0]]

    def test_too_many_clusters(self):
        with pytest.raises(ValueError):
            cluster_by_position(["1", "1"], [1, 2], 3)

    def test_restrict_overlapping_grouping(self):
        from app.schemas.sche_cohort import GroupingScheme

        grouping = GroupingScheme(
            modality=Modality.RNA, group_indices=[[0, 1], [1, 2], [3]], group_names=["a", "b", "c"], num_features=4
        )
        restricted = restrict_grouping(grouping, [1, 2])
        assert restricted.group_names == ["a", "b"]
        assert [g.tolist() for g in restricted.group_indices] == [[0], [0, 1]]
        assert restricted.num_features == 2
