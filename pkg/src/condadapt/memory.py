"""Parameter memory and the on-disk checkpoint container.

Container layout (all integers little-endian):

    bytes 0..3    magic b"ADPT"
    bytes 4..7    format version, u32 (currently 1)
    bytes 8..15   metadata length L, u64
    bytes 16..    L bytes of UTF-8 JSON metadata
    then          concatenated float32 little-endian tensor payloads

The metadata JSON holds ``tensors`` (name, shape, offset into the payload,
sha256 of the raw bytes) plus a free-form ``extra`` object. Loading verifies
magic, version and every tensor hash, so a flipped byte is always rejected.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError, ContractError, NotFoundError
from .params import ParamSet

MAGIC = b"ADPT"
VERSION = 1

DESCRIPTOR_DIM = 128


def _sha256(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def save_container(path: str | Path, arrays: dict[str, np.ndarray], extra: Optional[dict] = None) -> None:
    """Persist named float32 arrays atomically (write temp, then rename)."""
    path = Path(path)
    metas = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        metas.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": _sha256(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    meta = json.dumps({"tensors": metas, "extra": extra or {}}, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(meta)))
        f.write(meta)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Load a container, verifying magic, version and per-tensor hashes."""
    path = Path(path)
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack("<Q", blob[8:16])
    try:
        meta = json.loads(blob[16 : 16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    payload = blob[16 + meta_len :]
    arrays = {}
    for entry in meta["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"] or _sha256(raw) != entry["sha256"]:
            raise CheckpointError(f"{path}: hash mismatch for tensor {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    return arrays, meta.get("extra", {})


def paramset_to_arrays(params: ParamSet, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + name: t.data for name, t in params.items()}


def arrays_to_paramset(arrays: dict[str, np.ndarray], prefix: str = "", requires_grad: bool = True) -> ParamSet:
    ps = ParamSet()
    for name, arr in arrays.items():
        if name.startswith(prefix):
            ps.add(name[len(prefix) :], Tensor(arr.copy(), requires_grad=requires_grad))
    return ps


@dataclass
class AdapterRecord:
    """One stored condition: adapter weights, generators and the centroid key."""

    condition_id: int
    descriptor: np.ndarray
    adapter_params: ParamSet
    generator_ab: Optional[ParamSet] = None
    generator_ba: Optional[ParamSet] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.descriptor = np.asarray(self.descriptor, dtype=np.float32)
        if self.descriptor.shape != (DESCRIPTOR_DIM,):
            raise ContractError(f"descriptor must have length {DESCRIPTOR_DIM}")

    @property
    def has_generators(self) -> bool:
        return self.generator_ab is not None and self.generator_ba is not None


class ParameterMemory:
    """Adapter/generator store addressable by condition index or descriptor."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._records: dict[int, AdapterRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    def ids(self) -> list[int]:
        return sorted(self._records)

    def records(self) -> list[AdapterRecord]:
        return [self._records[k] for k in self.ids()]

    def next_id(self, minimum: int = 0) -> int:
        return max([minimum - 1, *self._records.keys()], default=minimum - 1) + 1

    def _record_path(self, condition_id: int) -> Path:
        return self.root / f"record_{condition_id:04d}.adpt"

    def store(self, record: AdapterRecord) -> int:
        if record.condition_id in self._records:
            raise ContractError(f"record id {record.condition_id} already stored")
        arrays = {"descriptor": record.descriptor}
        arrays.update(paramset_to_arrays(record.adapter_params, "adapter/"))
        if record.generator_ab is not None:
            arrays.update(paramset_to_arrays(record.generator_ab, "gen_ab/"))
        if record.generator_ba is not None:
            arrays.update(paramset_to_arrays(record.generator_ba, "gen_ba/"))
        save_container(
            self._record_path(record.condition_id),
            arrays,
            extra={"condition_id": record.condition_id, "provenance": record.provenance},
        )
        self._records[record.condition_id] = record
        self._write_manifest()
        return record.condition_id

    def _write_manifest(self) -> None:
        manifest = {
            "records": [
                {
                    "condition_id": rid,
                    "path": self._record_path(rid).name,
                    "provenance": self._records[rid].provenance,
                }
                for rid in self.ids()
            ]
        }
        tmp = self.root / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        os.replace(tmp, self.root / "manifest.json")

    def query_by_index(self, condition_id: int) -> AdapterRecord:
        try:
            return self._records[condition_id]
        except KeyError:
            raise NotFoundError(f"no record for condition id {condition_id}") from None

    def query_by_descriptor(self, descriptor: np.ndarray, require_generators: bool = False):
        """Nearest record by Euclidean distance; ties break toward the lowest id."""
        d = np.asarray(descriptor, dtype=np.float32)
        best = None
        best_dist = None
        for rid in self.ids():
            rec = self._records[rid]
            if require_generators and not rec.has_generators:
                continue
            dist = float(np.linalg.norm(rec.descriptor.astype(np.float64) - d.astype(np.float64)))
            if best_dist is None or dist < best_dist:
                best, best_dist = rec, dist
        if best is None:
            raise NotFoundError("parameter memory is empty")
        return best, best_dist

    @classmethod
    def load(cls, root: str | Path) -> "ParameterMemory":
        root = Path(root)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise NotFoundError(f"no memory manifest at {manifest_path}")
        mem = cls(root)
        manifest = json.loads(manifest_path.read_text())
        for entry in manifest["records"]:
            arrays, extra = load_container(root / entry["path"])
            gen_ab = arrays_to_paramset(arrays, "gen_ab/")
            gen_ba = arrays_to_paramset(arrays, "gen_ba/")
            rec = AdapterRecord(
                condition_id=extra["condition_id"],
                descriptor=arrays["descriptor"],
                adapter_params=arrays_to_paramset(arrays, "adapter/"),
                generator_ab=gen_ab if len(gen_ab) else None,
                generator_ba=gen_ba if len(gen_ba) else None,
                provenance=extra.get("provenance", {}),
            )
            mem._records[rec.condition_id] = rec
        return mem
