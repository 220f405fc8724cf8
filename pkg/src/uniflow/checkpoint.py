"""Single-file checkpoints: magic, header length, JSON header, little-endian f32 blob.

Layout::

    b"UNIFLOW1" | uint64 LE header byte count | UTF-8 JSON header | f32 blob

The header holds the patch and model configs, free-form metadata, and a
parameter manifest of ``{name, shape, offset}`` entries (offset in bytes
from the start of the blob).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .model import ModelConfig, UniFlow
from .patching import PatchConfig

MAGIC = b"UNIFLOW1"


class CheckpointError(ValueError):
    pass


def state_arrays(model: UniFlow) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, t in model.state_dict().items():
        out.append((name, t.detach().cpu().numpy().astype("<f4")))
    return out


def save_checkpoint(model: UniFlow, path, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    manifest, blobs, offset = [], [], 0
    for name, arr in state_arrays(model):
        raw = np.ascontiguousarray(arr).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": 1,
        "patch_config": vars(model.patch_cfg).copy(),
        "model_config": model.model_cfg.to_dict(),
        "meta": meta or {},
        "parameters": manifest,
        "blob_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path) -> tuple[UniFlow, dict]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", data[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start: start + n].decode("utf-8"))
    blob = memoryview(data)[start + n:]
    if len(blob) != header["blob_bytes"]:
        raise CheckpointError(f"blob holds {len(blob)} bytes, header declares {header['blob_bytes']}")
    model = UniFlow(PatchConfig(**header["patch_config"]), ModelConfig.from_dict(header["model_config"]))
    state = {}
    for entry in header["parameters"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    model.load_state_dict(state)
    model.eval()
    return model, header["meta"]
