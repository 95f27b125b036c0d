"""
Modality tokenizers mapping histopathology patches and omics profiles into R^d.
"""

import logging
from typing import Optional

import torch
from torch import nn

from app.core.nn import MultiHeadAttention, SNNBlock, layer_norm
from app.helpers.exception_handler import DataValidationError
from app.schemas.sche_cohort import GroupingScheme

logger = logging.getLogger(__name__)

PROTOTYPE_INIT_STD = 0.02


def _check_patches(patches: torch.Tensor, patch_dim: int) -> torch.Tensor:
    if patches.dim() == 2:
        patches = patches.unsqueeze(0)
    if patches.dim() != 3 or patches.shape[1] == 0:
        raise DataValidationError("empty patch set", field="wsi")
    if patches.shape[-1] != patch_dim:
        raise DataValidationError(
            f"patch embeddings have dimension {patches.shape[-1]}, expected {patch_dim}", field="wsi"
        )
    return patches


class PrototypeTokenizer(nn.Module):
    """
    N_h learnable prototypes, each cross-attending over the projected patch set.

    Layer norm on the queries and on the keys/values, no feed-forward sublayer.
    With `residual` the prototype is added back to its attention output.
    """

    def __init__(self, patch_dim: int, d: int, num_prototypes: int, heads: int,
                 dropout: float = 0.0, residual: bool = True):
        super().__init__()
        self.patch_dim = patch_dim
        self.residual = residual
        self.prototypes = nn.Parameter(torch.randn(num_prototypes, d) * PROTOTYPE_INIT_STD)
        self.kv_proj = nn.Linear(patch_dim, d)
        self.norm_query = layer_norm(d)
        self.norm_kv = layer_norm(d)
        self.attn = MultiHeadAttention(d, heads, dropout)

    @property
    def num_tokens(self) -> int:
        return self.prototypes.shape[0]

    def forward(self, patches: torch.Tensor, padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, N, d_H) patches, optional (B, N) padding mask -> (B, N_h, d) tokens."""
        patches = _check_patches(patches, self.patch_dim)
        kv = self.norm_kv(self.kv_proj(patches))
        queries = self.norm_query(self.prototypes).expand(patches.shape[0], -1, -1)
        tokens = self.attn(queries, kv, key_padding_mask=padding_mask)
        if self.residual:
            tokens = tokens + self.prototypes
        return tokens


class AbmilAggregator(nn.Module):
    """Gated-attention pooling of projected patches into one slide vector."""

    def __init__(self, patch_dim: int, d: int, hidden: int = 128, dropout: float = 0.0):
        super().__init__()
        self.patch_dim = patch_dim
        self.proj = nn.Linear(patch_dim, d)
        self.attention_v = nn.Linear(d, hidden)
        self.attention_u = nn.Linear(d, hidden)
        self.attention_w = nn.Linear(hidden, 1)
        self.dropout = nn.Dropout(dropout)

    @property
    def num_tokens(self) -> int:
        return 0

    def attention(self, h: torch.Tensor, padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        gate = torch.tanh(self.attention_v(h)) * torch.sigmoid(self.attention_u(h))
        scores = self.attention_w(gate).squeeze(-1)
        if padding_mask is not None:
            scores = scores.masked_fill(padding_mask, float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(self, patches: torch.Tensor, padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, N, d_H) -> (B, d)."""
        patches = _check_patches(patches, self.patch_dim)
        h = self.proj(patches)
        weights = self.attention(h, padding_mask)
        return self.dropout(torch.einsum("bn,bnd->bd", weights, h))


class OmicsGroupTokenizer(nn.Module):
    """One SNN map per feature group: token k = phi_k(x[group k])."""

    def __init__(self, grouping: GroupingScheme, d: int, dropout: float = 0.0):
        super().__init__()
        self.grouping = grouping
        self.modality = grouping.modality
        self.num_features = grouping.num_features
        self.group_indices = [torch.as_tensor(g, dtype=torch.long) for g in grouping.group_indices]
        self.phi = nn.ModuleList([SNNBlock(len(g), d, dropout) for g in grouping.group_indices])

    @property
    def num_tokens(self) -> int:
        return len(self.phi)

    def gather(self, values: torch.Tensor, k: int) -> torch.Tensor:
        return values.index_select(-1, self.group_indices[k])

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        """(B, F) transformed profile -> (B, K, d) tokens."""
        if values.shape[-1] != self.num_features:
            raise DataValidationError(
                f"profile has {values.shape[-1]} features, grouping expects {self.num_features}",
                field=self.modality.value,
            )
        return torch.stack([phi(self.gather(values, k)) for k, phi in enumerate(self.phi)], dim=-2)


def tokenize_histo(tok: PrototypeTokenizer, patches: torch.Tensor) -> torch.Tensor:
    """Single patient: (N, d_H) -> (N_h, d)."""
    return tok(patches.unsqueeze(0)).squeeze(0)


def tokenize_histo_abmil(aggregator: AbmilAggregator, patches: torch.Tensor) -> torch.Tensor:
    return aggregator(patches.unsqueeze(0)).squeeze(0)


def tokenize_omics(tok: OmicsGroupTokenizer, values: torch.Tensor) -> torch.Tensor:
    """Single profile: (F,) -> (K, d)."""
    return tok(values.unsqueeze(0)).squeeze(0)
