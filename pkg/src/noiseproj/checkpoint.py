"""Single-file checkpoint format: a JSON manifest line (diff-able header)
followed by a raw little-endian float32 parameter blob.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = "noiseproj-ckpt"
FORMAT_VERSION = 1

STAGES = ("reward", "projector-warmup", "projector-final")


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model, config_hash, stage):
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage {stage!r}; expected one of {STAGES}")
    entries = []
    blobs = []
    offset = 0
    for name, p in sorted(model.named_parameters()):
        raw = np.ascontiguousarray(p.data.astype("<f4")).tobytes()
        entries.append({
            "name": name,
            "shape": list(p.data.shape),
            "offset": offset,
            "length": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "config_hash": config_hash,
        "stage": stage,
        "param_hash": model.param_hash(),
        "tensors": entries,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for raw in blobs:
            f.write(raw)


def read_manifest(path):
    with open(path, "rb") as f:
        header = f.readline()
    try:
        manifest = json.loads(header)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: not a checkpoint file ({e})")
    if manifest.get("magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic {manifest.get('magic')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('version')}")
    return manifest


def load_checkpoint(path, model, expected_config_hash=None, override=False):
    """Load parameters in place; refuses on config-hash mismatch unless
    override is set. Returns the manifest."""
    manifest = read_manifest(path)
    if (expected_config_hash is not None
            and manifest["config_hash"] != expected_config_hash
            and not override):
        raise CheckpointError(
            f"{path}: config hash mismatch (checkpoint {manifest['config_hash']}, "
            f"current {expected_config_hash}); pass override to load anyway")
    params = dict(model.named_parameters())
    names = {e["name"] for e in manifest["tensors"]}
    if names != set(params):
        missing = sorted(set(params) - names)
        extra = sorted(names - set(params))
        raise CheckpointError(f"{path}: parameter set mismatch "
                              f"(missing {missing}, unexpected {extra})")
    with open(path, "rb") as f:
        header_len = len(f.readline())
        for entry in manifest["tensors"]:
            f.seek(header_len + entry["offset"])
            raw = f.read(entry["length"])
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
            p = params[entry["name"]]
            p.data = arr.astype(p.data.dtype)
    got = model.param_hash()
    if got != manifest["param_hash"]:
        raise CheckpointError(f"{path}: parameter hash mismatch after load "
                              f"({got} vs {manifest['param_hash']})")
    return manifest
