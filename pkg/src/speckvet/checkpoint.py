"""Single-file model checkpoints.

Layout: one JSON manifest line (UTF-8, terminated by a newline) followed by a
raw blob of little-endian float32 tensor data. The manifest records the model
kind, its config, user metadata, and the offset of every tensor in the blob,
so a load rebuilds the exact model without pickling code.
"""

from __future__ import annotations

import importlib
import json
import os
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

FORMAT_MARKER = "speckvet-checkpoint"
FORMAT_VERSION = 1
_BLOB_DTYPE = np.dtype("<f4")

_KNOWN_KINDS: Dict[str, Tuple[str, str]] = {
    "embedding": ("speckvet.model", "EmbeddingNet"),
    "binary_baseline": ("speckvet.baseline", "BinaryHitNet"),
}


class CheckpointError(Exception):
    """Raised when a checkpoint file cannot be written or read back."""


def _resolve_kind(kind: str):
    try:
        module_name, class_name = _KNOWN_KINDS[kind]
    except KeyError:
        raise CheckpointError(
            f"unknown model kind {kind!r}; known kinds: {sorted(_KNOWN_KINDS)}") from None
    return getattr(importlib.import_module(module_name), class_name)


def save_checkpoint(model, path, metadata: Optional[dict] = None) -> None:
    """Write the model to `path` atomically (temp file + rename)."""
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    named = [(name, t.data, "param") for name, t in model.named_parameters().items()]
    named += [(name, arr, "buffer") for name, arr in model.named_buffers().items()]
    for name, arr, role in named:
        data = np.ascontiguousarray(arr, dtype=_BLOB_DTYPE)
        entries.append({
            "name": name, "role": role, "shape": list(arr.shape),
            "offset": offset, "size": int(data.size),
        })
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = {
        "format": FORMAT_MARKER,
        "format_version": FORMAT_VERSION,
        "model_kind": model.checkpoint_kind,
        "config": model.config_dict(),
        "metadata": metadata or {},
        "tensors": entries,
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(manifest).encode("utf-8"))
        fh.write(b"\n")
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def read_manifest(path) -> dict:
    """Parse and validate the manifest line without touching the blob."""
    with open(path, "rb") as fh:
        line = fh.readline()
    if not line.endswith(b"\n"):
        raise CheckpointError(f"{path}: missing manifest line; file is not a checkpoint or is truncated")
    try:
        manifest = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: manifest line is not valid JSON: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_MARKER:
        raise CheckpointError(f"{path}: not a {FORMAT_MARKER} file")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {version} not supported (this build reads version {FORMAT_VERSION})")
    return manifest


def load_checkpoint(path):
    """Rebuild the saved model; weights and running stats come back bit-exact."""
    path = Path(path)
    manifest = read_manifest(path)
    with open(path, "rb") as fh:
        fh.readline()
        blob = fh.read()
    expected = sum(e["size"] for e in manifest["tensors"]) * _BLOB_DTYPE.itemsize
    if len(blob) != expected:
        raise CheckpointError(
            f"{path}: blob holds {len(blob)} bytes but manifest expects {expected}; file is truncated or corrupt")
    cls = _resolve_kind(manifest["model_kind"])
    model = cls.from_config(manifest["config"])
    params = model.named_parameters()
    flat = np.frombuffer(blob, dtype=_BLOB_DTYPE)
    for entry in manifest["tensors"]:
        start = entry["offset"] // _BLOB_DTYPE.itemsize
        arr = flat[start:start + entry["size"]].reshape(entry["shape"])
        if entry["role"] == "param":
            if entry["name"] not in params:
                raise CheckpointError(f"{path}: manifest names unknown parameter {entry['name']!r}")
            target = params[entry["name"]].data
            if list(target.shape) != entry["shape"]:
                raise CheckpointError(
                    f"{path}: parameter {entry['name']!r} has shape {entry['shape']} "
                    f"but the configured model expects {list(target.shape)}")
            target[...] = arr.astype(target.dtype)
        else:
            model.set_buffer(entry["name"], arr.astype(np.float32))
    model.checkpoint_metadata = dict(manifest["metadata"])
    return model
