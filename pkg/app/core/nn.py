"""
Dense building blocks shared by the tokenizers, the encoder and the omics decoders.

All model math runs in double precision; importing this module sets torch's
default dtype accordingly.
"""

import math
import logging
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Iterator, List, Optional

import torch
import torch.nn.functional as F
from torch import nn

from app.helpers.exception_handler import NumericError

logger = logging.getLogger(__name__)

torch.set_default_dtype(torch.float64)

SELU_ALPHA = 1.6732632423543772848170429916717
SELU_LAMBDA = 1.0507009873554804934193349852946
LN_EPS = 1e-9


def scaled_dot_attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    heads: int,
    key_padding_mask: Optional[torch.Tensor] = None,
    return_weights: bool = False,
):
    """
    Multi-head scaled dot-product attention without projections.

    queries: (..., Lq, d), keys/values: (..., Lk, d). The last dimension is split
    into `heads` chunks of d // heads. `key_padding_mask` (..., Lk) marks padded
    keys with True. Returns (..., Lq, d) and, optionally, the (..., heads, Lq, Lk)
    attention weights.
    """
    d = queries.shape[-1]
    if keys.shape[-1] != d or values.shape[-1] != d:
        raise ValueError(
            f"attention dimension mismatch: queries {tuple(queries.shape)}, "
            f"keys {tuple(keys.shape)}, values {tuple(values.shape)}"
        )
    if keys.shape[-2] != values.shape[-2]:
        raise ValueError(
            f"keys and values disagree on sequence length: {keys.shape[-2]} != {values.shape[-2]}"
        )
    if heads < 1 or d % heads:
        raise ValueError(f"heads={heads} does not divide d={d}")

    head_dim = d // heads
    q = queries.unflatten(-1, (heads, head_dim)).transpose(-3, -2)
    k = keys.unflatten(-1, (heads, head_dim)).transpose(-3, -2)
    v = values.unflatten(-1, (heads, head_dim)).transpose(-3, -2)

    scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
    if key_padding_mask is not None:
        scores = scores.masked_fill(key_padding_mask[..., None, None, :], float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = (weights @ v).transpose(-3, -2).flatten(-2)
    if return_weights:
        return out, weights
    return out


_kink_inputs: ContextVar[Optional[List[torch.Tensor]]] = ContextVar("kink_inputs", default=None)


@contextmanager
def record_kink_inputs() -> Iterator[List[torch.Tensor]]:
    """Collect, in call order, the inputs of every non-smooth op evaluated inside the block."""
    inputs: List[torch.Tensor] = []
    token = _kink_inputs.set(inputs)
    try:
        yield inputs
    finally:
        _kink_inputs.reset(token)


def _note_kink_input(x: torch.Tensor) -> None:
    inputs = _kink_inputs.get()
    if inputs is not None:
        inputs.append(x.detach().clone())


def selu(x: torch.Tensor) -> torch.Tensor:
    _note_kink_input(x)
    return F.selu(x)


def absolute(x: torch.Tensor) -> torch.Tensor:
    _note_kink_input(x)
    return x.abs()


def layer_norm(d: int) -> nn.LayerNorm:
    return nn.LayerNorm(d, eps=LN_EPS)


class SNNBlock(nn.Module):
    """Linear -> SELU -> alpha-dropout, LeCun-normal initialised."""

    def __init__(self, in_dim: int, out_dim: int, dropout: float = 0.0):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.linear = nn.Linear(in_dim, out_dim)
        self.dropout = nn.AlphaDropout(p=dropout)
        nn.init.normal_(self.linear.weight, std=1.0 / math.sqrt(in_dim))
        nn.init.zeros_(self.linear.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"SNN block expects last dimension {self.in_dim}, got {x.shape[-1]}")
        return self.dropout(selu(self.linear(x)))


def snn_block(x: torch.Tensor, in_dim: int, out_dim: int, dropout: float = 0.0) -> torch.Tensor:
    return SNNBlock(in_dim, out_dim, dropout)(x)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if heads < 1 or d % heads:
            raise ValueError(f"heads={heads} does not divide d={d}")
        self.heads = heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, context, key_padding_mask=None):
        out = scaled_dot_attention(
            self.q_proj(query),
            self.k_proj(context),
            self.v_proj(context),
            self.heads,
            key_padding_mask=key_padding_mask,
        )
        return self.dropout(self.out_proj(out))


class FeedForward(nn.Module):
    def __init__(self, d: int, mlp_dim: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(d, mlp_dim)
        self.fc2 = nn.Linear(mlp_dim, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.dropout(self.fc2(F.gelu(self.fc1(x))))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, d: int, heads: int, mlp_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm_attn = layer_norm(d)
        self.attn = MultiHeadAttention(d, heads, dropout)
        self.norm_mlp = layer_norm(d)
        self.mlp = FeedForward(d, mlp_dim, dropout)

    def forward(self, x, key_padding_mask=None):
        h = self.norm_attn(x)
        x = x + self.attn(h, h, key_padding_mask=key_padding_mask)
        return x + self.mlp(self.norm_mlp(x))


class CrossAttentionBlock(nn.Module):
    """Pre-norm decoder block: cross-attention to a context, then self-attention, then MLP."""

    def __init__(self, d: int, heads: int, mlp_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm_query = layer_norm(d)
        self.norm_context = layer_norm(d)
        self.cross_attn = MultiHeadAttention(d, heads, dropout)
        self.norm_self = layer_norm(d)
        self.self_attn = MultiHeadAttention(d, heads, dropout)
        self.norm_mlp = layer_norm(d)
        self.mlp = FeedForward(d, mlp_dim, dropout)

    def forward(self, x, context, context_padding_mask=None):
        x = x + self.cross_attn(
            self.norm_query(x), self.norm_context(context), key_padding_mask=context_padding_mask
        )
        h = self.norm_self(x)
        x = x + self.self_attn(h, h)
        return x + self.mlp(self.norm_mlp(x))


def set_dropout(module: nn.Module, p: float) -> None:
    """Reset the rate of every dropout layer below `module`."""
    for child in module.modules():
        if isinstance(child, (nn.Dropout, nn.AlphaDropout)):
            child.p = p


def assert_finite(tensor: torch.Tensor, what: str) -> None:
    if not torch.isfinite(tensor).all():
        raise NumericError(f"non-finite values in {what}")
