import math

import pytest
import torch

from app.core.nn import (
    SELU_ALPHA,
    SELU_LAMBDA,
    SNNBlock,
    TransformerBlock,
    assert_finite,
    layer_norm,
    scaled_dot_attention,
    selu,
    snn_block,
)
from app.helpers.exception_handler import NumericError


class TestScaledDotAttention:
    def test_saturated_query_returns_matching_value(self):
        """
            Test attention picks the value of the key the query matches
            Step by step:
            - Orthogonal keys, query equal to key 2 scaled large
            - Expected output:
                . output within 1e-6 of value row 2
        """
        keys = torch.eye(4) * 50.0
        values = torch.arange(16.0).reshape(4, 4)
        out = scaled_dot_attention(keys[2:3], keys, values, heads=1)
        assert torch.allclose(out[0], values[2], atol=1e-6)

    def test_identical_values_pass_through(self):
        gen = torch.Generator().manual_seed(0)
        q = torch.randn(3, 8, generator=gen)
        k = torch.randn(5, 8, generator=gen)
        v = torch.ones(5, 8) * 0.7
        out = scaled_dot_attention(q, k, v, heads=2)
        assert torch.allclose(out, torch.full((3, 8), 0.7), atol=1e-15)

    def test_weights_are_distributions(self):
        gen = torch.Generator().manual_seed(1)
        q, k, v = (torch.randn(4, 8, generator=gen) for _ in range(3))
        _, weights = scaled_dot_attention(q, k, v, heads=2, return_weights=True)
        assert weights.shape == (2, 4, 4)
        assert torch.allclose(weights.sum(-1), torch.ones(2, 4), atol=1e-12)

    def test_padding_keys_get_no_weight(self):
        gen = torch.Generator().manual_seed(2)
        q, k, v = (torch.randn(1, 3, 4, generator=gen) for _ in range(3))
        mask = torch.tensor([[False, False, True]])
        _, weights = scaled_dot_attention(q, k, v, heads=1, key_padding_mask=mask, return_weights=True)
        assert torch.all(weights[..., 2] == 0)

    @pytest.mark.parametrize("heads", [0, 3])
    def test_heads_must_divide_d(self, heads):
        x = torch.zeros(2, 8)
        with pytest.raises(ValueError):
            scaled_dot_attention(x, x, x, heads=heads)

    def test_key_value_length_mismatch(self):
        with pytest.raises(ValueError):
            scaled_dot_attention(torch.zeros(2, 4), torch.zeros(3, 4), torch.zeros(2, 4), heads=1)


class TestSelu:
    def test_fixed_points(self):
        assert selu(torch.tensor(0.0)).item() == 0.0
        assert selu(torch.tensor(1.0)).item() == pytest.approx(SELU_LAMBDA, abs=1e-12)
        assert selu(torch.tensor(-50.0)).item() == pytest.approx(-SELU_LAMBDA * SELU_ALPHA, abs=1e-12)
        assert SELU_LAMBDA * SELU_ALPHA == pytest.approx(1.7581, abs=1e-4)


class TestSnnBlock:
    def test_zero_weights_give_zero(self):
        block = SNNBlock(5, 3).eval()
        torch.nn.init.zeros_(block.linear.weight)
        out = block(torch.randn(4, 5))
        assert torch.equal(out, torch.zeros(4, 3))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            SNNBlock(5, 3)(torch.zeros(2, 4))

    def test_functional_form_shape(self):
        torch.manual_seed(0)
        assert snn_block(torch.zeros(2, 5), 5, 7).shape == (2, 7)

    def test_alpha_dropout_rate(self):
        """
            Test alpha-dropout touches the configured fraction of units
            Step by step:
            - Identity-like block at dropout 0.15 in training mode
            - Expected output:
                . fraction of units set to the dropout constant is 0.15 +/- 0.02
        """
        torch.manual_seed(3)
        block = SNNBlock(1, 10_000, dropout=0.15).train()
        torch.nn.init.ones_(block.linear.weight)
        out = block(torch.ones(1, 1))
        # dropped units all share the affine image of -lambda*alpha
        values, counts = torch.unique(out, return_counts=True)
        assert abs(counts.min().item() / 10_000 - 0.15) < 0.02
        assert values.numel() == 2


class TestLayerNorm:
    def test_normalises_rows(self):
        norm = layer_norm(16)
        x = torch.randn(5, 16) * 4 + 3
        y = norm(x)
        assert torch.all(y.mean(-1).abs() < 1e-9)
        assert torch.allclose(y.var(-1, unbiased=False), torch.ones(5), atol=1e-6)


class TestTransformerBlock:
    def test_permutation_equivariance(self):
        torch.manual_seed(0)
        block = TransformerBlock(8, 2, 16).eval()
        x = torch.randn(1, 5, 8)
        perm = torch.tensor([3, 0, 4, 1, 2])
        assert torch.allclose(block(x)[:, perm], block(x[:, perm]), atol=1e-12)

    def test_assert_finite(self):
        assert_finite(torch.ones(3), "ones")
        with pytest.raises(NumericError):
            assert_finite(torch.tensor([1.0, math.inf]), "inf")
