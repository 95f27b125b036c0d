"""
On-disk cohort format.

Numeric payloads: 16-byte header (4-byte magic ``MPHS``, little-endian uint32
version, little-endian uint64 value count) followed by little-endian float64
values. Patch payloads are row-major (patches x patch_dim).
Grouping files: one line per group, ``name<TAB>idx,idx,...``.
Feature tables: ``feature_id<TAB>chromosome<TAB>position`` per line.
Manifest: TOML, see ``CohortManifest``. See document/DATA_FORMAT.md.
"""

import logging
import os
from typing import Iterable, List, Optional

import numpy as np
import toml
from more_itertools import chunked
from pydantic import ValidationError
from tqdm import tqdm

from app.helpers.enums import Modality
from app.helpers.exception_handler import DataValidationError, get_message_validation
from app.schemas.sche_cohort import CohortManifest, FeatureTable, GroupingScheme

logger = logging.getLogger(__name__)

PAYLOAD_MAGIC = b"MPHS"
PAYLOAD_VERSION = 1
HEADER_DTYPE = np.dtype([("magic", "S4"), ("version", "<u4"), ("length", "<u8")])
VALUE_DTYPE = np.dtype("<f8")


def write_payload(path: str, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype=VALUE_DTYPE).reshape(-1)
    header = np.array([(PAYLOAD_MAGIC, PAYLOAD_VERSION, values.size)], dtype=HEADER_DTYPE)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(values.tobytes())


def read_payload(path: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise DataValidationError("payload file not found", field=path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_DTYPE.itemsize:
        raise DataValidationError("truncated payload header", field=path)
    header = np.frombuffer(raw[: HEADER_DTYPE.itemsize], dtype=HEADER_DTYPE)[0]
    if header["magic"] != PAYLOAD_MAGIC:
        raise DataValidationError("bad payload magic", field=path)
    if int(header["version"]) != PAYLOAD_VERSION:
        raise DataValidationError(f"unsupported payload version {int(header['version'])}", field=path)
    length = int(header["length"])
    body = raw[HEADER_DTYPE.itemsize:]
    if len(body) != length * VALUE_DTYPE.itemsize:
        raise DataValidationError(
            f"payload declares {length} values but holds {len(body) // VALUE_DTYPE.itemsize}", field=path
        )
    return np.frombuffer(body, dtype=VALUE_DTYPE).astype(np.float64)


def write_grouping(path: str, grouping: GroupingScheme) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for name, group in zip(grouping.group_names, grouping.group_indices):
            fh.write(name + "\t" + ",".join(str(int(i)) for i in group) + "\n")


def read_grouping(path: str, modality: Modality, num_features: int) -> GroupingScheme:
    if not os.path.isfile(path):
        raise DataValidationError("grouping file not found", field=path)
    names, groups = [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                name, indices = line.split("\t", 1)
                groups.append([int(i) for i in indices.split(",") if i.strip()])
            except ValueError:
                raise DataValidationError(f"malformed line {line_no}", field=path)
            names.append(name)
    try:
        return GroupingScheme(modality=modality, group_indices=groups, group_names=names, num_features=num_features)
    except ValidationError as e:
        raise DataValidationError(get_message_validation(e), field=f"{modality.value} grouping")


def write_features(path: str, table: FeatureTable) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for fid, chrom, pos in zip(table.feature_ids, table.chromosomes, table.positions):
            fh.write(f"{fid}\t{chrom}\t{int(pos)}\n")


def read_features(path: str) -> FeatureTable:
    if not os.path.isfile(path):
        raise DataValidationError("feature table not found", field=path)
    ids, chroms, positions = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                fid, chrom, pos = line.rstrip("\n").split("\t")
                positions.append(int(pos))
            except ValueError:
                raise DataValidationError(f"malformed line {line_no}", field=path)
            ids.append(fid)
            chroms.append(chrom)
    return FeatureTable(feature_ids=ids, chromosomes=chroms, positions=np.asarray(positions, dtype=np.int64))


def read_manifest(path: str) -> CohortManifest:
    if not os.path.isfile(path):
        raise DataValidationError("manifest not found", field=path)
    try:
        return CohortManifest.model_validate(toml.load(path))
    except toml.TomlDecodeError as e:
        raise DataValidationError(f"manifest is not valid TOML ({e})", field=path)
    except ValidationError as e:
        raise DataValidationError(get_message_validation(e), field="manifest")


def write_manifest(path: str, manifest: CohortManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        toml.dump(manifest.model_dump(mode="json", exclude_none=True), fh)


def write_payloads(root: str, items: Iterable, batch_size: int = 64, desc: Optional[str] = None) -> List[str]:
    """Write (relative path, values) pairs under `root` in batches."""
    items = list(items)
    written = []
    chunks = list(chunked(items, batch_size))
    for chunk in tqdm(chunks, desc=desc or f"Writing {len(items)} payloads", disable=len(chunks) < 2):
        for rel_path, values in chunk:
            write_payload(os.path.join(root, rel_path), values)
            written.append(rel_path)
    return written
