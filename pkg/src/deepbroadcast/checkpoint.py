"""Versioned checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"DBCKPT\\x00\\x01"
    version    uint32    FORMAT_VERSION
    hdr_len    uint32    length of the JSON header in bytes
    header     hdr_len   UTF-8 JSON (see below)
    hdr_crc    uint32    CRC-32 of the header bytes
    payload    ...       concatenated float32 little-endian tensors

The header holds ``variant``, ``model_config``, ``experiment`` (fully resolved
experiment config), ``epoch``, ``metrics`` (one dict per finished epoch),
``optimizer`` (scalar optimizer state), ``tensors`` (``name``, ``shape``,
``offset`` and ``nbytes`` into the payload) and ``payload_sha256``.  Model
parameters are stored under their module names; optimizer moments under
``optim/<param>/<slot>``.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

MAGIC = b"DBCKPT\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, truncated or tampered checkpoint."""


@dataclass
class Checkpoint:
    variant: str
    model_config: dict
    state: Dict[str, torch.Tensor]
    epoch: int = 0
    experiment: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    optimizer: Optional[dict] = None  # {"step": int, "slots": {param name: {slot: tensor}}}

    def build_model(self):
        from .nets import ModelConfig, build_variant

        model = build_variant(self.variant, ModelConfig(**self.model_config))
        model.load_state_dict(self.state)
        model.eval()
        return model


def _to_le_f32(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    tensors = dict(ckpt.state)
    opt_header = None
    if ckpt.optimizer is not None:
        opt_header = {"step": ckpt.optimizer["step"]}
        for pname, slots in ckpt.optimizer["slots"].items():
            for slot, t in slots.items():
                tensors[f"optim/{pname}/{slot}"] = t

    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        raw = _to_le_f32(t)
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "variant": ckpt.variant,
        "model_config": ckpt.model_config,
        "experiment": ckpt.experiment,
        "epoch": ckpt.epoch,
        "metrics": ckpt.metrics,
        "optimizer": opt_header,
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hdr)))
        fh.write(hdr)
        fh.write(struct.pack("<I", zlib.crc32(hdr)))
        fh.write(payload)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.dbc"
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated")
    version, hdr_len = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    hdr = blob[16:16 + hdr_len]
    if len(hdr) != hdr_len or len(blob) < 20 + hdr_len:
        raise CheckpointError(f"{path}: truncated header")
    (crc,) = struct.unpack("<I", blob[16 + hdr_len:20 + hdr_len])
    if zlib.crc32(hdr) != crc:
        raise CheckpointError(f"{path}: header checksum mismatch")
    header = json.loads(hdr)
    payload = blob[20 + hdr_len:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupted or truncated)")

    state, slots = {}, {}
    for e in header["tensors"]:
        arr = np.frombuffer(payload, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        t = torch.from_numpy(arr.astype(np.float32)).reshape(e["shape"])
        name = e["name"]
        if name.startswith("optim/"):
            pname, slot = name[len("optim/"):].rsplit("/", 1)
            slots.setdefault(pname, {})[slot] = t
        else:
            state[name] = t
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = {"step": header["optimizer"]["step"], "slots": slots}
    return Checkpoint(
        variant=header["variant"],
        model_config=header["model_config"],
        state=state,
        epoch=header["epoch"],
        experiment=header["experiment"],
        metrics=header["metrics"],
        optimizer=optimizer,
    )
