import logging

import numpy as np
import pytest
import torch

from app.core.gradcheck import grad_check
from app.core.nn import absolute, selu
from app.helpers.exception_handler import NumericError
from app.services.srv_masking import MaskingService
from app.services.srv_model import build_batch


class TestGradCheck:
    def test_quadratic(self):
        w = torch.nn.Parameter(torch.tensor([0.3, -1.2, 2.0]))
        assert grad_check(lambda: (w ** 2).sum(), {"w": w}) < 1e-8

    def test_selu_away_from_kink(self):
        w = torch.nn.Parameter(torch.tensor([0.7, -0.4, 1.3, -2.2]))
        assert grad_check(lambda: selu(w).sum(), {"w": w}) < 1e-6

    def test_selu_kink_is_skipped(self, caplog):
        """
            Test a coordinate sitting on the selu kink
            Step by step:
            - w = [0.5, 2e-6, -0.7]; the middle input is below 10 * epsilon
            - Expected output:
                . the middle coordinate is skipped, the others pass
        """
        caplog.set_level(logging.DEBUG, logger="app.core.gradcheck")
        w = torch.nn.Parameter(torch.tensor([0.5, 2e-6, -0.7]))
        assert grad_check(lambda: selu(w).sum(), {"w": w}) < 1e-6
        assert "1 kink coordinates skipped" in caplog.text

    def test_kink_measured_on_the_op_input(self, caplog):
        """
            Test the rule looks at the non-smooth input, not the parameter
            Step by step:
            - |2w - 1| with w = 0.5 + 1e-6 (input 2e-6), plus a parameter v = 3e-6 used smoothly
            - Expected output:
                . only w is skipped; v is checked even though its value is tiny
        """
        caplog.set_level(logging.DEBUG, logger="app.core.gradcheck")
        w = torch.nn.Parameter(torch.tensor([0.5 + 1e-6]))
        v = torch.nn.Parameter(torch.tensor([3e-6]))
        error = grad_check(lambda: absolute(2 * w - 1).sum() + (v ** 2).sum(), {"w": w, "v": v})
        assert error < 1e-6
        assert "1 kink coordinates skipped" in caplog.text

    def test_non_finite_loss(self):
        w = torch.nn.Parameter(torch.tensor([1.0]))
        with pytest.raises(NumericError):
            grad_check(lambda: w * float("inf"), {"w": w})

    def test_end_to_end_pretrain_loss(self, tiny_model, tiny_cohort):
        """
            Test reverse-mode gradients of the whole pre-training loss
            Step by step:
            - d=8, 2 heads, 2-3 groups per modality, 2 patients, dropout off
            - Fixed patches and mask plans
            - Expected output:
                . worst relative error < 1e-4 over every parameter
        """
        tiny_model.eval()
        rng = np.random.default_rng(0)
        batch = build_batch(tiny_cohort.records[:2], tiny_cohort.feature_counts, 4, rng)
        plans = [
            MaskingService.sample_mask_plan(tiny_model.token_counts, 0.5, 1.0, rng) for _ in range(2)
        ]
        params = dict(tiny_model.named_parameters())
        error = grad_check(lambda: tiny_model.pretrain_loss(batch, plans)[0], params)
        assert error < 1e-4
