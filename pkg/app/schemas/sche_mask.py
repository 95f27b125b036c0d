from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import confloat, model_validator

from app.helpers.enums import Modality
from app.schemas.sche_base import ArraySchemaBase

WEIGHT_TOLERANCE = 1e-12


class MaskPlan(ArraySchemaBase):
    """Visible/masked assignment of every omics token of one patient."""

    visible: Dict[Modality, np.ndarray]
    ratio: confloat(ge=0, le=1)
    weights: Tuple[float, ...]
    seed: Optional[Tuple[int, ...]] = None

    @model_validator(mode="after")
    def check_plan(self):
        for modality, flags in self.visible.items():
            if modality == Modality.WSI:
                raise ValueError("histopathology tokens are never masked")
            if flags.dtype != np.bool_ or flags.ndim != 1:
                raise ValueError(f"{modality.value} visibility must be a boolean vector")
        w = np.asarray(self.weights, dtype=np.float64)
        if (w < 0).any() or abs(w.sum() - 1.0) > WEIGHT_TOLERANCE:
            raise ValueError("mask weights must be non-negative and sum to 1")
        return self

    @property
    def modalities(self):
        return list(self.visible)

    def token_count(self, modality: Modality) -> int:
        return int(self.visible[modality].size)

    def visible_count(self, modality: Modality = None) -> int:
        if modality is not None:
            return int(self.visible[modality].sum())
        return int(sum(v.sum() for v in self.visible.values()))

    def visible_indices(self, modality: Modality) -> np.ndarray:
        return np.flatnonzero(self.visible[modality])

    def masked_indices(self, modality: Modality) -> np.ndarray:
        return np.flatnonzero(~self.visible[modality])

    def to_bitmask_line(self) -> str:
        """Compact replayable form: `r=<hex> w=<hex,...> rna=<n>:<hex bits> ...`."""
        parts = [
            f"r={float(self.ratio).hex()}",
            "w=" + ",".join(float(w).hex() for w in self.weights),
        ]
        for modality, flags in self.visible.items():
            parts.append(f"{modality.value}={flags.size}:{np.packbits(flags).tobytes().hex()}")
        return " ".join(parts)

    @classmethod
    def from_bitmask_line(cls, line: str) -> "MaskPlan":
        fields = dict(part.split("=", 1) for part in line.split())
        visible = {}
        for key, value in fields.items():
            if key in ("r", "w"):
                continue
            size, bits = value.split(":", 1)
            unpacked = np.unpackbits(np.frombuffer(bytes.fromhex(bits), dtype=np.uint8))
            visible[Modality.parse(key)] = unpacked[: int(size)].astype(bool)
        return cls(
            visible=visible,
            ratio=float.fromhex(fields["r"]),
            weights=tuple(float.fromhex(w) for w in fields["w"].split(",")),
        )
