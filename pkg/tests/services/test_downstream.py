import copy

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from app.core.optim import LrSchedule
from app.core.seeding import SeedStreams
from app.helpers.enums import FinetuneScope, Modality
from app.helpers.exception_handler import DataValidationError
from app.schemas.sche_run import SubtypeConfig, SurvivalConfig
from app.services.srv_downstream import (
    DownstreamModel,
    SubtypeHead,
    SurvivalHead,
    auc,
    few_shot_protocol,
    fine_tune,
    multiclass_auc,
    predict,
    survival_cv,
)
from app.services.srv_model import ModelService
from app.services.srv_synth import generate_cohort


@pytest.fixture()
def factory(tiny_model):
    return lambda run: copy.deepcopy(tiny_model)


class TestAuc:
    def test_examples(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auc([0.5] * 4, [0, 1, 0, 1]) == 0.5

    def test_label_inversion(self, rng):
        scores = rng.normal(size=30)
        labels = rng.integers(0, 2, 30)
        labels[:2] = [0, 1]
        assert auc(scores, labels) + auc(scores, 1 - labels) == pytest.approx(1.0, abs=1e-12)

    def test_single_class(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [1, 1])

    def test_multiclass(self):
        probabilities = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
        assert multiclass_auc(probabilities, [0, 1, 0]) == 1.0
        three = np.eye(3)[[0, 1, 2, 0]]
        assert multiclass_auc(three, [0, 1, 2, 0]) == 1.0

    def test_multiclass_is_macro_one_vs_rest(self, rng):
        logits = rng.normal(size=(40, 3))
        probabilities = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        labels = np.tile([0, 1, 2, 0], 10)
        expected = np.mean([auc(probabilities[:, c], labels == c) for c in range(3)])
        assert multiclass_auc(probabilities, labels) == pytest.approx(expected, abs=1e-12)

    def test_multiclass_skips_absent_class(self):
        probabilities = np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1], [0.1, 0.8, 0.1]])
        assert multiclass_auc(probabilities, [0, 1, 0, 1]) == 1.0


class TestDownstreamModel:
    def test_heads(self):
        assert SubtypeHead(8, 3).out_features == 3
        with pytest.raises(ValueError):
            SurvivalHead(8, 1)

    def test_scopes(self, tiny_model):
        model = DownstreamModel(tiny_model, SubtypeHead(8, 2), [Modality.RNA])
        histo = model.trainable_parameters(FinetuneScope.HISTO)
        full = model.trainable_parameters(FinetuneScope.FULL)
        assert all(n.startswith(("backbone.histo.", "head.")) for n in histo)
        assert not any(n.startswith("backbone.decoders.") for n in full)
        assert any(n.startswith("backbone.encoder.") for n in full)
        assert set(histo) < set(full)

    def test_histo_scope_freezes_the_rest(self, tiny_model, tiny_cohort):
        """
            Test the histopathology-only fine-tuning scope
            Step by step:
            - Fine-tune one epoch with scope=histo
            - Expected output:
                . encoder and omics tokenizers unchanged, head and histo tokenizer updated
        """
        model = DownstreamModel(copy.deepcopy(tiny_model), SubtypeHead(8, 2))
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        labels = {r.patient_id: int(r.subtype_label) for r in tiny_cohort.records}

        def loss_fn(logits, records):
            return F.cross_entropy(logits, torch.as_tensor([labels[r.patient_id] for r in records]))

        fine_tune(
            model, tiny_cohort.records[:4], loss_fn, LrSchedule.constant(1e-2, 1), 1, 2, 0.0,
            FinetuneScope.HISTO, tiny_cohort.feature_counts, 4, SeedStreams(0), (9,),
        )
        after = dict(model.named_parameters())
        assert all(torch.equal(before[n], after[n]) for n in before if n.startswith("backbone.encoder."))
        assert all(torch.equal(before[n], after[n]) for n in before if n.startswith("backbone.tokenizers."))
        assert not torch.equal(before["head.weight"], after["head.weight"])
        assert any(not torch.equal(before[n], after[n]) for n in before if n.startswith("backbone.histo."))

    def test_predict_shape(self, tiny_model, tiny_cohort):
        model = DownstreamModel(tiny_model, SurvivalHead(8, 4))
        assert predict(model, tiny_cohort.records, tiny_cohort.feature_counts, batch_size=3).shape == (8, 4)


class TestFewShot:
    def test_protocol(self, factory, tiny_cohort):
        config = SubtypeConfig(k=2, runs=2, epochs=1, lr=1e-3)
        result = few_shot_protocol(factory, tiny_cohort, config, seed=3, patch_sample=4)
        assert len(result.aucs) == 2
        assert all(0.0 <= a <= 1.0 for a in result.aucs)
        assert result.mean == pytest.approx(np.mean(result.aucs))
        rows = result.rows()
        assert [r.split for r in rows] == ["run0", "run1", "summary", "summary"]

    def test_reproducible(self, factory, tiny_cohort):
        config = SubtypeConfig(k=1, runs=1, epochs=1, visible=[Modality.RNA])
        a = few_shot_protocol(factory, tiny_cohort, config, seed=8, patch_sample=4)
        b = few_shot_protocol(factory, tiny_cohort, config, seed=8, patch_sample=4)
        assert a.aucs == b.aucs

    def test_insufficient_patients(self, factory, tiny_cohort):
        with pytest.raises(DataValidationError):
            few_shot_protocol(factory, tiny_cohort, SubtypeConfig(k=4, runs=1, epochs=0), seed=0, patch_sample=4)

    def test_missing_visible_modality(self, factory, tiny_cohort):
        record = tiny_cohort.records[0]
        stripped = record.model_copy(update={"omics": {Modality.DNAM: record.omics[Modality.DNAM]}})
        cohort = tiny_cohort.model_copy(update={"records": [stripped] + tiny_cohort.records[1:]})
        with pytest.raises(DataValidationError):
            few_shot_protocol(factory, cohort, SubtypeConfig(k=1, runs=1, visible=[Modality.RNA]), 0, 4)


class TestSurvivalCV:
    def test_folds_and_predictions(self, factory, tiny_cohort):
        config = SurvivalConfig(folds=2, epochs=1, batch_size=4, num_intervals=2, warmup_epochs=0)
        result, predictions = survival_cv(factory, tiny_cohort, config, seed=2, patch_sample=4)
        assert len(result.c_indices) == 2
        assert sorted(predictions["patient_id"]) == tiny_cohort.ids
        assert list(predictions.columns) == ["patient_id", "fold", "risk", "survival_1", "survival_2"]
        assert (predictions["survival_2"] <= predictions["survival_1"]).all()
        assert [r.split for r in result.rows()][:2] == ["fold0", "fold1"]

    def test_too_few_patients(self, factory, tiny_cohort):
        with pytest.raises(DataValidationError):
            survival_cv(factory, tiny_cohort, SurvivalConfig(folds=9, epochs=0), seed=0, patch_sample=4)


@pytest.mark.slow
class TestProtocolStatistics:
    @staticmethod
    def scratch_factory(config, cohort):
        return lambda run: ModelService.build_model(config, cohort.groupings, seed=100 + run)

    def test_few_shot_spread_shrinks_with_k(self, tiny_config, small_synth_config):
        """
            Test the run-to-run spread of few-shot AUC
            Step by step:
            - 200 synthetic patients, subtype given by one latent coordinate
            - 10 runs at k=1 and 10 runs at k=10 on the same cohort and seed
            - Expected output:
                . AUC std at k=1 exceeds AUC std at k=10
        """
        cohort = generate_cohort(small_synth_config.model_copy(update={"num_patients": 200}))
        factory = self.scratch_factory(tiny_config, cohort)
        spread = {}
        for k in (1, 10):
            config = SubtypeConfig(k=k, runs=10, epochs=10, batch_size=2, lr=1e-3, dropout=0.0)
            spread[k] = few_shot_protocol(factory, cohort, config, seed=5, patch_sample=4).std
        assert spread[1] > spread[10]

    def test_random_survival_labels(self, tiny_config, small_synth_config):
        """
            Test survival cross-validation when labels carry no signal
            Step by step:
            - 500 synthetic patients with their survival labels shuffled
            - 5-fold fine-tuning from scratch
            - Expected output:
                . mean C-index 0.5 +- 0.07
        """
        cohort = generate_cohort(small_synth_config.model_copy(update={"num_patients": 500}))
        order = np.random.default_rng(23).permutation(len(cohort))
        records = [
            record.model_copy(update={"survival": cohort.records[j].survival})
            for record, j in zip(cohort.records, order)
        ]
        shuffled = cohort.model_copy(update={"records": records})
        config = SurvivalConfig(folds=5, epochs=2, batch_size=32, num_intervals=4, warmup_epochs=0, dropout=0.0)
        result, _ = survival_cv(self.scratch_factory(tiny_config, shuffled), shuffled, config, seed=1, patch_sample=4)
        assert abs(result.mean - 0.5) <= 0.07
