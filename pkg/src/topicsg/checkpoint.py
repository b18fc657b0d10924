"""Named-parameter archives: a JSON manifest plus a little-endian float32 blob."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

FORMAT = "topicsg-params-v1"


class CheckpointError(RuntimeError):
    """Missing, corrupt or shape-incompatible checkpoint."""


def state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy() for name, p in module.named_parameters()}


def save_params(module: torch.nn.Module, manifest_path: str | Path, meta: dict | None = None) -> None:
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    entries, offset, chunks = {}, 0, []
    for name, arr in state_arrays(module).items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    blob_path.write_bytes(blob)
    manifest = {
        "format": FORMAT,
        "blob": blob_path.name,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "meta": meta or {},
        "params": entries,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_manifest(manifest_path: str | Path) -> dict:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise CheckpointError(f"checkpoint not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint manifest {manifest_path}: {e}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise CheckpointError(f"{manifest_path}: not a {FORMAT} manifest")
    return manifest


def load_arrays(manifest_path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    blob_path = manifest_path.parent / manifest["blob"]
    if not blob_path.is_file():
        raise CheckpointError(f"checkpoint blob not found: {blob_path}")
    blob = blob_path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"{blob_path}: checksum mismatch")
    arrays = {}
    for name, e in manifest["params"].items():
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + 4 * count > len(blob):
            raise CheckpointError(f"{blob_path}: parameter {name} runs past the end of the blob")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"]).copy()
    return arrays, manifest.get("meta", {})


def assign_params(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    own = dict(module.named_parameters())
    if set(own) != set(arrays):
        missing, extra = sorted(set(own) - set(arrays)), sorted(set(arrays) - set(own))
        raise CheckpointError(f"parameter names differ (missing={missing[:3]}, unexpected={extra[:3]})")
    with torch.no_grad():
        for name, p in own.items():
            if tuple(p.shape) != arrays[name].shape:
                raise CheckpointError(f"parameter {name}: shape {arrays[name].shape} != expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arrays[name]).to(p.dtype))


def params_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, arr in state_arrays(module).items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
