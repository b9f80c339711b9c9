"""Checkpoint directories: ``manifest.json`` plus one little-endian float32 blob.

The manifest lists every array's name, shape, dtype and byte offset together
with free-form metadata (epoch, configs). Writes go to a sibling temp
directory that is swapped into place, so a reader never sees a half-written
checkpoint.
"""

from __future__ import annotations

import json
import os
import shutil
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .networks import NetworkParams

BLOB = "params.f32"
MANIFEST = "manifest.json"
FORMAT = "orthoct-checkpoint-1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    entries, offset = [], 0
    with open(tmp / BLOB, "wb") as fh:
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(data.shape), "dtype": "f32le", "offset": offset})
            offset += data.nbytes
    manifest = {"format": FORMAT, "arrays": entries, "blob_bytes": offset, "meta": meta}
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    old = path.with_name(path.name + ".old")
    if path.exists():
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
    os.replace(tmp, path)
    if old.exists():
        shutil.rmtree(old)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not (path / MANIFEST).is_file() or not (path / BLOB).is_file():
        raise CheckpointError(f"{path}: not a checkpoint directory")
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    blob = (path / BLOB).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"{path}: blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    arrays = {}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return arrays, manifest["meta"]


def pack(prefix: str, params: NetworkParams | dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": getattr(v, "data", v) for k, v in params.items()}


def unpack(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    head = prefix + "/"
    return {k[len(head):]: v for k, v in arrays.items() if k.startswith(head)}


def restore_params(template: NetworkParams, arrays: dict[str, np.ndarray]) -> NetworkParams:
    """Copy checkpoint arrays into a freshly built parameter set, checking names and shapes."""
    if list(template) != list(arrays):
        diff = sorted(set(template) ^ set(arrays))
        raise CheckpointError(f"checkpoint parameters do not match the network: {diff[:5]}")
    out = NetworkParams()
    for k, t in template.items():
        if t.shape != arrays[k].shape:
            raise CheckpointError(f"shape mismatch for {k}: network {t.shape}, checkpoint {arrays[k].shape}")
        out[k] = Tensor(arrays[k].astype(t.dtype), requires_grad=t.requires_grad)
    return out
