"""
Shared multimodal encoder, per-modality omics decoders, masked reconstruction loss
and any-to-any generation.
"""

import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import Field
from torch import nn

from app.core.nn import CrossAttentionBlock, SNNBlock, TransformerBlock, absolute, assert_finite, layer_norm
from app.db.checkpoint import load_checkpoint
from app.helpers.enums import HistoMode, Modality
from app.helpers.exception_handler import DataValidationError, MaskingError
from app.helpers.paging import iter_pages
from app.schemas.sche_base import ArraySchemaBase
from app.schemas.sche_cohort import GroupingScheme, PatientRecord
from app.schemas.sche_mask import MaskPlan
from app.schemas.sche_model import CheckpointData, ModelConfig
from app.services.srv_masking import MaskingService
from app.services.srv_tokenizer import AbmilAggregator, OmicsGroupTokenizer, PrototypeTokenizer

logger = logging.getLogger(__name__)

EMBED_INIT_STD = 0.02


class ModelBatch(ArraySchemaBase):
    """Padded patches plus per-modality input values and reconstruction targets."""

    patient_ids: List[str]
    patches: torch.Tensor
    patch_padding: Optional[torch.Tensor] = None
    values: Dict[Modality, torch.Tensor] = Field(default_factory=dict)
    targets: Dict[Modality, torch.Tensor] = Field(default_factory=dict)

    def __len__(self):
        return len(self.patient_ids)


class EncoderOutput(ArraySchemaBase):
    z: torch.Tensor
    padding: torch.Tensor
    # per patient: sequence position and group index of every visible omics token
    positions: List[Dict[Modality, torch.Tensor]]
    groups: List[Dict[Modality, torch.Tensor]]

    @property
    def lengths(self) -> List[int]:
        return (~self.padding).sum(dim=1).tolist()


def build_batch(
    records: Sequence[PatientRecord],
    feature_counts: Dict[Modality, int],
    patch_sample: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> ModelBatch:
    """
    Stack patients into a batch.

    With `patch_sample` every patient contributes exactly that many patches, drawn
    uniformly (with replacement when it has fewer); otherwise all patches are used
    and shorter sets are padded. Absent modalities are zero-filled and must never
    be marked visible.
    """
    if not records:
        raise ValueError("empty batch")
    sets = []
    for record in records:
        embeddings = record.patches.embeddings
        if patch_sample is not None:
            n = embeddings.shape[0]
            rows = rng.choice(n, size=patch_sample, replace=n < patch_sample)
            embeddings = embeddings[rows]
        sets.append(torch.from_numpy(np.ascontiguousarray(embeddings)))
    longest = max(s.shape[0] for s in sets)
    patches = torch.zeros(len(sets), longest, sets[0].shape[1])
    padding = torch.ones(len(sets), longest, dtype=torch.bool)
    for b, s in enumerate(sets):
        patches[b, : s.shape[0]] = s
        padding[b, : s.shape[0]] = False

    values = {}
    for modality, count in feature_counts.items():
        rows = [
            record.omics[modality].values if modality in record.omics else np.zeros(count)
            for record in records
        ]
        values[modality] = torch.from_numpy(np.stack(rows).astype(np.float64))
    return ModelBatch(
        patient_ids=[r.patient_id for r in records],
        patches=patches,
        patch_padding=padding if padding.any() else None,
        values=values,
        targets=dict(values),
    )


class OmicsDecoder(nn.Module):
    """
    Reconstructs every group of one modality from the encoder output.

    Visible tokens are projected into place, masked positions receive the learnable
    mask token; decoder group embeddings are added before the cross-attention blocks.
    """

    def __init__(self, d: int, heads: int, mlp_dim: int, layers: int, dropout: float, group_sizes: Sequence[int]):
        super().__init__()
        self.proj = nn.Linear(d, d)
        self.mask_token = nn.Parameter(torch.randn(d) * EMBED_INIT_STD)
        self.group_embed = nn.Parameter(torch.randn(len(group_sizes), d) * EMBED_INIT_STD)
        self.blocks = nn.ModuleList([CrossAttentionBlock(d, heads, mlp_dim, dropout) for _ in range(layers)])
        self.norm = layer_norm(d)
        self.heads = nn.ModuleList([
            nn.Sequential(SNNBlock(d, d, dropout), nn.Linear(d, size)) for size in group_sizes
        ])

    def forward(self, z: torch.Tensor, padding: torch.Tensor, token_pos: torch.Tensor, visible: torch.Tensor):
        """
        z: (B, L, d) encoder output; token_pos: (B, K) sequence position of each
        visible group (ignored where masked); visible: (B, K) bool.
        """
        context = self.proj(z)
        placed = torch.gather(context, 1, token_pos.unsqueeze(-1).expand(-1, -1, context.shape[-1]))
        x = torch.where(visible.unsqueeze(-1), placed, self.mask_token) + self.group_embed
        for block in self.blocks:
            x = block(x, context, context_padding_mask=padding)
        x = self.norm(x)
        return [head(x[:, k]) for k, head in enumerate(self.heads)]


class MorpheusModel(nn.Module):
    def __init__(self, config: ModelConfig, groupings: Dict[Modality, GroupingScheme]):
        super().__init__()
        missing = [m for m in config.modalities if m not in groupings]
        if missing:
            raise DataValidationError(f"no grouping for {[m.value for m in missing]}", field="groupings")
        if config.patch_dim is None:
            raise ValueError("patch_dim must be set before building the model")
        self.config = config.model_copy(update={
            "group_counts": {m: groupings[m].num_groups for m in config.modalities}
        })
        self.modalities = list(config.modalities)
        d = config.d

        if config.histo_mode == HistoMode.ABMIL:
            self.histo = AbmilAggregator(config.patch_dim, d, config.abmil_hidden, config.dropout)
        else:
            self.histo = PrototypeTokenizer(
                config.patch_dim, d, config.num_prototypes, config.heads, config.dropout, config.prototype_residual
            )
            self.cls_token = nn.Parameter(torch.randn(d) * EMBED_INIT_STD)

        self.tokenizers = nn.ModuleDict({
            m.value: OmicsGroupTokenizer(groupings[m], d, config.dropout) for m in self.modalities
        })
        self.modality_embed = nn.ParameterDict({
            m.value: nn.Parameter(torch.randn(d) * EMBED_INIT_STD) for m in self.modalities
        })
        self.group_embed = nn.ParameterDict({
            m.value: nn.Parameter(torch.randn(groupings[m].num_groups, d) * EMBED_INIT_STD) for m in self.modalities
        })
        self.encoder = nn.ModuleList([
            TransformerBlock(d, config.heads, config.mlp_dim, config.dropout) for _ in range(config.encoder_layers)
        ])
        self.encoder_norm = layer_norm(d)
        self.decoders = nn.ModuleDict({
            m.value: OmicsDecoder(
                d, config.heads, config.mlp_dim, config.decoder_layers, config.dropout, groupings[m].sizes
            )
            for m in self.modalities
        })

    @property
    def token_counts(self) -> Dict[Modality, int]:
        return {m: self.tokenizers[m.value].num_tokens for m in self.modalities}

    @property
    def prefix_length(self) -> int:
        """Tokens before the omics tokens: <cls> + prototypes, or the ABMIL slide vector."""
        if self.config.histo_mode == HistoMode.ABMIL:
            return 1
        return 1 + self.histo.num_tokens

    def histo_tokens(self, patches: torch.Tensor, padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        tokens = self.histo(patches, padding)
        if self.config.histo_mode == HistoMode.ABMIL:
            return tokens.unsqueeze(1)
        return tokens

    def omics_tokens(self, values: Dict[Modality, torch.Tensor]) -> Dict[Modality, torch.Tensor]:
        return {m: self.tokenizers[m.value](values[m]) for m in self.modalities if m in values}

    def encode_sequences(
        self,
        histo: torch.Tensor,
        visible: List[Dict[Modality, Tuple[torch.Tensor, torch.Tensor]]],
    ) -> EncoderOutput:
        """
        histo: (B, H, d) histopathology tokens; visible: per patient, per modality,
        (tokens (V, d), group indices (V,)). Builds [<cls>, T^h, T^rna, T^dnam, T^cnv]
        (the ABMIL slide vector takes the place of <cls>) and runs the encoder.
        """
        d = self.config.d
        if histo.shape[-1] != d:
            raise ValueError(f"histopathology tokens have dimension {histo.shape[-1]}, expected {d}")
        sequences, positions, groups = [], [], []
        for b, per_modality in enumerate(visible):
            parts = [histo[b]] if self.config.histo_mode == HistoMode.ABMIL else [self.cls_token.unsqueeze(0), histo[b]]
            offset = self.prefix_length
            pos, grp = {}, {}
            for m in self.modalities:
                if m not in per_modality:
                    continue
                tokens, ids = per_modality[m]
                if tokens.shape[-1] != d:
                    raise ValueError(f"{m.value} tokens have dimension {tokens.shape[-1]}, expected {d}")
                parts.append(tokens + self.modality_embed[m.value] + self.group_embed[m.value][ids])
                pos[m] = torch.arange(offset, offset + ids.numel())
                grp[m] = ids
                offset += ids.numel()
            sequences.append(torch.cat(parts, dim=0))
            positions.append(pos)
            groups.append(grp)

        longest = max(s.shape[0] for s in sequences)
        padding = torch.ones(len(sequences), longest, dtype=torch.bool)
        rows = []
        for b, s in enumerate(sequences):
            if s.shape[0] < longest:
                s = torch.cat([s, s.new_zeros(longest - s.shape[0], d)], dim=0)
            rows.append(s)
            padding[b, : sequences[b].shape[0]] = False
        z = torch.stack(rows)
        mask = padding if padding.any() else None
        for block in self.encoder:
            z = block(z, key_padding_mask=mask)
        z = self.encoder_norm(z)
        return EncoderOutput(z=z, padding=padding, positions=positions, groups=groups)

    def encode(
        self,
        histo: torch.Tensor,
        omics_tokens: Dict[Modality, torch.Tensor],
        plans: Sequence[MaskPlan],
    ) -> EncoderOutput:
        """Select each patient's visible omics tokens according to its plan and encode."""
        visible = []
        for b, plan in enumerate(plans):
            per_modality = {}
            for m in self.modalities:
                if m not in plan.visible:
                    continue
                if plan.token_count(m) != self.token_counts[m]:
                    raise MaskingError(f"plan has {plan.token_count(m)} {m.value} tokens, model {self.token_counts[m]}")
                ids = torch.as_tensor(plan.visible_indices(m), dtype=torch.long)
                if ids.numel() and m not in omics_tokens:
                    raise MaskingError(f"{m.value} marked visible but no tokens were given")
                tokens = omics_tokens[m][b].index_select(0, ids) if ids.numel() else histo.new_zeros(0, self.config.d)
                per_modality[m] = (tokens, ids)
            visible.append(per_modality)
        return self.encode_sequences(histo, visible)

    def decode_modality(self, modality: Modality, enc: EncoderOutput) -> List[torch.Tensor]:
        """Per-group reconstructions (B, n_k) of one modality."""
        if modality.value not in self.decoders:
            raise MaskingError(f"model has no decoder for {modality.value}")
        num_groups = self.token_counts[modality]
        batch = enc.z.shape[0]
        token_pos = torch.zeros(batch, num_groups, dtype=torch.long)
        visible = torch.zeros(batch, num_groups, dtype=torch.bool)
        for b in range(batch):
            if modality in enc.groups[b] and enc.groups[b][modality].numel():
                token_pos[b, enc.groups[b][modality]] = enc.positions[b][modality]
                visible[b, enc.groups[b][modality]] = True
        padding = enc.padding if enc.padding.any() else None
        return self.decoders[modality.value](enc.z, padding, token_pos, visible)

    def forward(self, batch: ModelBatch, plans: Sequence[MaskPlan]):
        histo = self.histo_tokens(batch.patches, batch.patch_padding)
        enc = self.encode(histo, self.omics_tokens(batch.values), plans)
        return {m: self.decode_modality(m, enc) for m in self.modalities}, enc

    def targets(self, batch: ModelBatch) -> Dict[Modality, List[torch.Tensor]]:
        out = {}
        for m in self.modalities:
            tok = self.tokenizers[m.value]
            out[m] = [tok.gather(batch.targets[m], k) for k in range(tok.num_tokens)]
        return out

    def pretrain_loss(self, batch: ModelBatch, plans: Sequence[MaskPlan]):
        recons, _ = self.forward(batch, plans)
        return masked_mae_loss(recons, self.targets(batch), plans)

    def cls_embedding(self, batch: ModelBatch, visible: Iterable[Modality] = ()) -> torch.Tensor:
        """Global representation (B, d) with the given omics modalities fully visible."""
        plan = MaskingService.explicit_mask_plan(visible, [], self.token_counts)
        histo = self.histo_tokens(batch.patches, batch.patch_padding)
        enc = self.encode(histo, self.omics_tokens(batch.values), [plan] * len(batch))
        return enc.z[:, 0]


def masked_mae_loss(
    reconstructions: Dict[Modality, List[torch.Tensor]],
    targets: Dict[Modality, List[torch.Tensor]],
    plans: Sequence[MaskPlan],
):
    """
    Mean absolute error over the features of masked groups only, pooled over the
    batch per modality; the total is the unweighted mean over modalities with at
    least one masked group.

    Returns:
        (total loss tensor, {modality: per-modality loss tensor})
    """
    breakdown = {}
    for modality, recons in reconstructions.items():
        masked = torch.as_tensor(np.stack([~plan.visible[modality] for plan in plans]))
        error_sum, count = None, 0
        for k, (recon, target) in enumerate(zip(recons, targets[modality])):
            if recon.shape != target.shape:
                raise ValueError(f"{modality.value} group {k}: reconstruction {tuple(recon.shape)} vs target {tuple(target.shape)}")
            n_masked = int(masked[:, k].sum())
            if n_masked == 0:
                continue
            per_patient = absolute(recon - target).sum(dim=-1)
            term = torch.where(masked[:, k], per_patient, torch.zeros_like(per_patient)).sum()
            error_sum = term if error_sum is None else error_sum + term
            count += n_masked * recon.shape[-1]
        if count:
            breakdown[modality] = error_sum / count
    if not breakdown:
        raise MaskingError("no masked group in any modality")
    total = torch.stack(list(breakdown.values())).mean()
    return total, breakdown


class ModelService(object):

    @staticmethod
    def build_model(config: ModelConfig, groupings: Dict[Modality, GroupingScheme], seed: int) -> MorpheusModel:
        torch.manual_seed(seed)
        model = MorpheusModel(config, groupings)
        logger.info(
            "built model: %d parameters, %s tokens %s",
            sum(p.numel() for p in model.parameters()),
            config.histo_mode.value,
            {m.value: n for m, n in model.token_counts.items()},
        )
        return model

    @staticmethod
    @torch.no_grad()
    def generate_batch(
        model: MorpheusModel,
        records: Sequence[PatientRecord],
        visible: Iterable[Modality],
        targets: Iterable[Modality],
        feature_counts: Dict[Modality, int],
    ) -> Dict[Modality, np.ndarray]:
        visible, targets = set(visible) - {Modality.WSI}, set(targets)
        for record in records:
            for modality in visible:
                if modality not in record.omics:
                    raise DataValidationError(
                        "requested visible modality is missing", patient_id=record.patient_id, field=modality.value
                    )
        if not targets:
            return {}
        was_training = model.training
        model.eval()
        try:
            batch = build_batch(records, feature_counts)
            plan = MaskingService.explicit_mask_plan(visible, targets, model.token_counts)
            histo = model.histo_tokens(batch.patches, batch.patch_padding)
            enc = model.encode(histo, model.omics_tokens(batch.values), [plan] * len(batch))
            out = {}
            for modality in targets:
                groups = model.decode_modality(modality, enc)
                tok = model.tokenizers[modality.value]
                total = torch.zeros(len(batch), tok.num_features)
                counts = torch.zeros(tok.num_features)
                for k, recon in enumerate(groups):
                    total.index_add_(1, tok.group_indices[k], recon)
                    counts.index_add_(0, tok.group_indices[k], torch.ones(recon.shape[-1]))
                merged = total / counts
                merged[:, counts == 0] = float("nan")
                out[modality] = merged.numpy()
            for modality, values in out.items():
                assert_finite(torch.from_numpy(np.nan_to_num(values, nan=0.0)), f"{modality.value} generation")
            return out
        finally:
            model.train(was_training)

    @staticmethod
    def generate(
        model: MorpheusModel,
        records: Sequence[PatientRecord],
        visible: Iterable[Modality],
        targets: Iterable[Modality],
        feature_counts: Dict[Modality, int],
        batch_size: int = 32,
    ) -> Dict[Modality, np.ndarray]:
        """
        Reconstruct `targets` for every record, conditioning on WSI plus `visible`.

        Returns full-length profiles (patients x features) per target modality;
        features in several groups are averaged, features in none are NaN.
        """
        visible, targets, records = list(visible), list(targets), list(records)
        if not targets:
            return {}
        if not records:
            return {m: np.empty((0, feature_counts[m])) for m in targets}
        pages = [
            ModelService.generate_batch(model, page, visible, targets, feature_counts)
            for page in iter_pages(records, batch_size)
        ]
        return {m: np.concatenate([p[m] for p in pages]) for m in pages[0]}

    @staticmethod
    def model_from_checkpoint(path: str) -> Tuple[MorpheusModel, CheckpointData]:
        """Rebuild a model from a checkpoint file; parameters are restored bit-exactly."""
        data = load_checkpoint(path)
        model = MorpheusModel(data.config, data.groupings)
        try:
            model.load_state_dict(data.tensors, strict=True)
        except RuntimeError as e:
            raise DataValidationError(f"checkpoint does not match its model config: {e}", field=path)
        return model, data
