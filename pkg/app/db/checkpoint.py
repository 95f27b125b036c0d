"""
Checkpoint container.

Layout: magic ``MPHC`` | uint32 version | uint64 meta length | meta (UTF-8 JSON) |
float64 payloads. The meta holds the entries table (name, shape, offset, length,
sha256 of the payload bytes), the model config, groupings, feature selection,
optimizer step bookkeeping and the RNG record.
"""

import hashlib
import json
import logging
import os
from typing import Dict, Mapping, Optional

import numpy as np
import torch
from pydantic import ValidationError

from app.core.optim import OptimizerState
from app.helpers.enums import Modality
from app.helpers.exception_handler import DataValidationError, get_message_validation
from app.schemas.sche_cohort import GroupingScheme
from app.schemas.sche_model import CheckpointData, ModelConfig

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MPHC"
CHECKPOINT_VERSION = 1
HEADER_DTYPE = np.dtype([("magic", "S4"), ("version", "<u4"), ("meta_length", "<u8")])
VALUE_DTYPE = np.dtype("<f8")

MODEL_PREFIX = "model."
OPTIM_PREFIX = "optim."


def _grouping_meta(grouping: GroupingScheme) -> dict:
    return {
        "names": list(grouping.group_names),
        "indices": [[int(i) for i in g] for g in grouping.group_indices],
        "num_features": grouping.num_features,
    }


def save_checkpoint(
    path: str,
    model_tensors: Mapping[str, torch.Tensor],
    config: ModelConfig,
    groupings: Mapping[Modality, GroupingScheme],
    feature_selection: Optional[Mapping[Modality, list]] = None,
    optimizer: Optional[OptimizerState] = None,
    rng: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> str:
    tensors: Dict[str, torch.Tensor] = {MODEL_PREFIX + k: v for k, v in model_tensors.items()}
    if optimizer is not None:
        tensors.update({OPTIM_PREFIX + k: v for k, v in optimizer.moments().items()})

    entries, payloads, offset = [], [], 0
    for name, tensor in tensors.items():
        data = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=VALUE_DTYPE).tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.shape),
            "offset": offset,
            "length": len(data),
            "sha256": hashlib.sha256(data).hexdigest(),
        })
        payloads.append(data)
        offset += len(data)

    meta = {
        "entries": entries,
        "config": config.model_dump(mode="json"),
        "groupings": {m.value: _grouping_meta(g) for m, g in groupings.items()},
        "feature_selection": {m.value: [int(i) for i in idx] for m, idx in (feature_selection or {}).items()},
        "optimizer": None if optimizer is None else {
            "steps": optimizer.steps(),
            "step_count": optimizer.step_count,
            "lr": optimizer.lr,
        },
        "rng": rng or {},
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    header = np.array([(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta_bytes))], dtype=HEADER_DTYPE)

    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(meta_bytes)
        for data in payloads:
            fh.write(data)
    os.replace(tmp_path, path)
    logger.info("checkpoint written to %s (%d entries)", path, len(entries))
    return path


def load_checkpoint(path: str) -> CheckpointData:
    if not os.path.isfile(path):
        raise DataValidationError("checkpoint not found", field=path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_DTYPE.itemsize:
        raise DataValidationError("truncated checkpoint header", field=path)
    header = np.frombuffer(raw[: HEADER_DTYPE.itemsize], dtype=HEADER_DTYPE)[0]
    if header["magic"] != CHECKPOINT_MAGIC:
        raise DataValidationError("not a checkpoint file", field=path)
    if int(header["version"]) != CHECKPOINT_VERSION:
        raise DataValidationError(f"unsupported checkpoint version {int(header['version'])}", field=path)
    start = HEADER_DTYPE.itemsize
    meta_length = int(header["meta_length"])
    meta = json.loads(raw[start:start + meta_length].decode("utf-8"))
    body = raw[start + meta_length:]

    model_tensors, moments = {}, {}
    for entry in meta["entries"]:
        data = body[entry["offset"]: entry["offset"] + entry["length"]]
        if len(data) != entry["length"] or hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise DataValidationError("checksum mismatch", field=f"{path}:{entry['name']}")
        tensor = torch.from_numpy(np.frombuffer(data, dtype=VALUE_DTYPE).astype(np.float64)).reshape(entry["shape"])
        name = entry["name"]
        if name.startswith(MODEL_PREFIX):
            model_tensors[name[len(MODEL_PREFIX):]] = tensor
        elif name.startswith(OPTIM_PREFIX):
            moments[name[len(OPTIM_PREFIX):]] = tensor

    try:
        config = ModelConfig.model_validate(meta["config"])
        groupings = {
            Modality(m): GroupingScheme(
                modality=Modality(m),
                group_indices=g["indices"],
                group_names=g["names"],
                num_features=g["num_features"],
            )
            for m, g in meta["groupings"].items()
        }
    except ValidationError as e:
        raise DataValidationError(get_message_validation(e), field=f"{path}:meta")

    optimizer = meta.get("optimizer") or {}
    return CheckpointData(
        config=config,
        groupings=groupings,
        feature_selection={Modality(m): idx for m, idx in meta.get("feature_selection", {}).items()},
        tensors=model_tensors,
        optimizer_moments=moments,
        optimizer_steps=optimizer.get("steps", {}),
        step_count=optimizer.get("step_count", 0),
        lr=optimizer.get("lr"),
        rng=meta.get("rng", {}),
        extra=meta.get("extra", {}),
    )
