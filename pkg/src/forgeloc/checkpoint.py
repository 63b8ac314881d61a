"""Shared on-disk checkpoint format.

A checkpoint is a directory holding ``manifest.json`` (tensor names, shapes,
dtype, byte offsets plus free-form metadata) and ``weights.bin``, the raw
little-endian float32 bytes of every tensor concatenated in manifest order.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import FileMissing, SchemaError

FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def _as_f32(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype=_LE_F32)


def tensors_hash(tensors: Mapping[str, torch.Tensor]) -> str:
    """Content hash over names, shapes and float32 bytes (in key order)."""
    h = hashlib.sha256()
    for name, t in tensors.items():
        arr = _as_f32(t)
        h.update(name.encode())
        h.update(repr(tuple(arr.shape)).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(directory, tensors: Mapping[str, torch.Tensor], meta: Mapping | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / "weights.bin", "wb") as fh:
        for name, t in tensors.items():
            arr = _as_f32(t)
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                            "offset": offset, "nbytes": arr.nbytes})
            offset += arr.nbytes
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries,
                "content_hash": tensors_hash(tensors), **(meta or {})}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[dict[str, torch.Tensor], dict]:
    directory = Path(directory)
    mpath, wpath = directory / "manifest.json", directory / "weights.bin"
    if not mpath.exists() or not wpath.exists():
        raise FileMissing(f"{directory} is not a checkpoint directory")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise SchemaError(f"{directory}: unsupported checkpoint version {manifest.get('format_version')}")
    blob = wpath.read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "float32":
            raise SchemaError(f"{directory}: tensor {e['name']} has dtype {e['dtype']}")
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise SchemaError(f"{directory}: weights.bin truncated at {e['name']}")
        arr = np.frombuffer(raw, dtype=_LE_F32).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return tensors, manifest
