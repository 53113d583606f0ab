"""Model bundles and their binary checkpoint format.

Layout: b"DLFM1", an 8-byte little-endian header length, a UTF-8 JSON header
(sorted keys) and then every tensor as little-endian float64, in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, canonical_json, config_hash, from_dict, to_dict

MAGIC = b"DLFM1"
VERSION = 1


class CheckpointError(IOError):
    pass


@dataclass(eq=False)
class ModelBundle:
    config: ExperimentConfig
    ae_params: dict[str, np.ndarray]
    flow_params: dict[str, np.ndarray] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def flow_cfg(self):
        return self.config.flow

    @property
    def arcrank_cfg(self):
        return self.config.ae.arcrank

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @property
    def has_flow(self) -> bool:
        return bool(self.flow_params)


def _tensors(bundle: ModelBundle) -> list[tuple[str, np.ndarray]]:
    out = [(f"ae/{k}", v) for k, v in sorted(bundle.ae_params.items())]
    out += [(f"flow/{k}", v) for k, v in sorted(bundle.flow_params.items())]
    return out


def to_bytes(bundle: ModelBundle) -> bytes:
    entries, payload, offset = [], [], 0
    for name, arr in _tensors(bundle):
        a = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        payload.append(a.tobytes())
        offset += a.nbytes
    cfg = to_dict(bundle.config)
    cfg.pop("out_dir")  # where a run was written is not part of the model
    header = {
        "version": VERSION,
        "config": cfg,
        "config_hash": bundle.config_hash,
        "provenance": bundle.provenance,
        "tensors": entries,
        "payload_bytes": offset,
    }
    head = canonical_json(header).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(payload)


def from_bytes(blob: bytes, source: str = "<bytes>") -> ModelBundle:
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError(f"{source}: truncated header length")
    (n,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) < pos + n:
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(blob[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: unreadable header ({e})") from e
    pos += n
    if header.get("version") != VERSION:
        raise CheckpointError(f"{source}: version {header.get('version')} != {VERSION}")
    if len(blob) - pos != header["payload_bytes"]:
        raise CheckpointError(f"{source}: payload is {len(blob) - pos} bytes, header says {header['payload_bytes']}")
    cfg = from_dict(header["config"])
    if config_hash(cfg) != header["config_hash"]:
        raise CheckpointError(f"{source}: config hash does not match the stored config")
    ae, flow = {}, {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        start = pos + t["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(tuple(t["shape"])).astype(np.float64)
        group, key = t["name"].split("/", 1)
        (ae if group == "ae" else flow)[key] = arr
    return ModelBundle(config=cfg, ae_params=ae, flow_params=flow, provenance=header["provenance"])


def save_bundle(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(bundle))
    return path


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return from_bytes(blob, str(path))
