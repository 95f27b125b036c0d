import numpy as np
import pytest

from app.helpers.enums import Modality
from app.helpers.exception_handler import MaskingError
from app.schemas.sche_mask import MaskPlan
from app.services.srv_masking import MaskingService, largest_remainder

COUNTS = {Modality.RNA: 50, Modality.DNAM: 51, Modality.CNV: 45}


class TestSampleMaskPlan:
    def test_visible_total(self):
        """
            Test the global visible budget
            Step by step:
            - Sample 200 plans for token counts (50, 51, 45) at r=0.75
            - Expected output:
                . every plan has floor(0.25 * 146) = 36 visible omics tokens
        """
        rng = np.random.default_rng(0)
        for _ in range(200):
            plan = MaskingService.sample_mask_plan(COUNTS, 0.75, 1.0, rng)
            assert plan.visible_count() == 36
            for modality, count in COUNTS.items():
                assert plan.visible[modality].size == count

    def test_fully_masked(self, rng):
        plan = MaskingService.sample_mask_plan(COUNTS, 1.0, 1.0, rng)
        assert plan.visible_count() == 0

    def test_forced_equal_weights(self, rng):
        plan = MaskingService.sample_mask_plan(COUNTS, 1 - 36 / 146, 1.0, rng, weights=(1 / 3, 1 / 3, 1 / 3))
        assert [plan.visible_count(m) for m in Modality.omics()] == [12, 12, 12]

    def test_dirichlet_moments(self):
        rng = np.random.default_rng(42)
        weights = np.array([
            MaskingService.sample_mask_plan(COUNTS, 0.75, 1.0, rng).weights for _ in range(10000)
        ])
        assert np.allclose(weights.mean(axis=0), 1 / 3, atol=0.02)
        assert np.allclose(weights.var(axis=0), 2 / 36, rtol=0.2)

    def test_hidden_and_full_modalities_occur(self):
        rng = np.random.default_rng(5)
        counts = {Modality.RNA: 4, Modality.DNAM: 4, Modality.CNV: 4}
        hidden = full = 0
        for _ in range(2000):
            plan = MaskingService.sample_mask_plan(counts, 0.5, 1.0, rng)
            hidden += any(plan.visible_count(m) == 0 for m in counts)
            full += any(plan.visible_count(m) == counts[m] for m in counts)
        assert hidden > 0
        assert full > 0

    def test_reproducible(self):
        a = MaskingService.sample_mask_plan(COUNTS, 0.75, 1.0, np.random.default_rng(9))
        b = MaskingService.sample_mask_plan(COUNTS, 0.75, 1.0, np.random.default_rng(9))
        assert a.weights == b.weights
        for modality in COUNTS:
            assert np.array_equal(a.visible[modality], b.visible[modality])

    @pytest.mark.parametrize("ratio, alpha", [(-0.1, 1.0), (1.5, 1.0), (0.5, 0.0)])
    def test_invalid_arguments(self, rng, ratio, alpha):
        with pytest.raises(MaskingError):
            MaskingService.sample_mask_plan(COUNTS, ratio, alpha, rng)


class TestBudgets:
    def test_overflow_redistribution(self):
        """
            Test clamping with capacity-proportional redistribution
            Step by step:
            - Weights (1, 0, 0), 60 visible tokens, counts (50, 51, 45)
            - Expected output:
                . rna clamps at 50; the 10 left over split 5/5 by remaining capacity
        """
        budget = MaskingService.budgets([1.0, 0.0, 0.0], 60, [50, 51, 45])
        assert budget.tolist() == [50, 5, 5]

    def test_total_holds(self, rng):
        for _ in range(100):
            weights = rng.dirichlet([0.3, 0.3, 0.3])
            total = int(rng.integers(0, 147))
            budget = MaskingService.budgets(weights, total, [50, 51, 45])
            assert budget.sum() == total
            assert np.all(budget <= [50, 51, 45])

    def test_budget_exceeds_tokens(self):
        with pytest.raises(MaskingError):
            MaskingService.budgets([0.5, 0.5], 10, [3, 3])

    def test_largest_remainder_ties_by_index(self):
        assert largest_remainder([0.5, 0.5, 0.5], 1).tolist() == [1, 0, 0]


class TestExplicitMaskPlan:
    def test_rna_to_dnam(self):
        plan = MaskingService.explicit_mask_plan([Modality.RNA], [Modality.DNAM], COUNTS)
        assert plan.visible[Modality.RNA].all()
        assert not plan.visible[Modality.DNAM].any()
        assert not plan.visible[Modality.CNV].any()
        assert np.array_equal(plan.masked_indices(Modality.DNAM), np.arange(COUNTS[Modality.DNAM]))

    def test_wsi_only(self):
        plan = MaskingService.explicit_mask_plan([], list(Modality.omics()), COUNTS)
        assert plan.visible_count() == 0

    def test_two_visible(self):
        plan = MaskingService.explicit_mask_plan([Modality.RNA, Modality.CNV], [Modality.DNAM], COUNTS)
        assert plan.visible_count() == 95

    def test_overlap(self):
        with pytest.raises(MaskingError):
            MaskingService.explicit_mask_plan([Modality.RNA], [Modality.RNA], COUNTS)


class TestBitmaskLine:
    def test_replay(self, rng):
        plan = MaskingService.sample_mask_plan(COUNTS, 0.6, 1.0, rng)
        replayed = MaskPlan.from_bitmask_line(plan.to_bitmask_line())
        assert replayed.ratio == plan.ratio
        assert replayed.weights == plan.weights
        for modality in COUNTS:
            assert np.array_equal(replayed.visible[modality], plan.visible[modality])

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            MaskPlan(visible={Modality.RNA: np.ones(2, dtype=bool)}, ratio=0.0, weights=(0.5,))
