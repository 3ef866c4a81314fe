"""Checkpoint directory: ``manifest.json`` plus one little-endian binary blob.

The manifest lists every tensor's name, shape, dtype and byte offset into
``tensors.bin``, and echoes the run configuration and seed. Tensors are
stored as ``<f8`` by default so a reload is bit-exact; ``<f4`` is accepted
for compact exports.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
BLOB = "tensors.bin"
FORMAT = "promptfed-ckpt/1"


def save(path, tensors: dict, config=None, seed=None, extra=None, dtype="<f8"):
    if dtype not in ("<f8", "<f4"):
        raise ValueError(f"unsupported checkpoint dtype {dtype!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, off = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=dtype)
        entries.append({"name": name, "shape": list(a.shape), "dtype": dtype, "offset": off, "nbytes": a.nbytes})
        chunks.append(a.tobytes())
        off += a.nbytes
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "tensors": entries,
        "config": config or {},
        "seed": seed,
        "extra": extra or {},
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load(path):
    """Returns (tensors, manifest); tensors come back as float64."""
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    blob = (path / BLOB).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError(f"{path}: blob checksum mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).astype(np.float64)
    return tensors, manifest


def save_backbone(path, weights, seed=None, extra=None):
    return save(path, {k: weights.params[k] for k in weights.names()}, weights.config.to_dict(), seed, extra)


def load_backbone(path):
    from .encoder import BackboneWeights, EncoderConfig

    tensors, manifest = load(path)
    cfg = EncoderConfig(**manifest["config"])
    return BackboneWeights(cfg, tensors).freeze(), manifest
