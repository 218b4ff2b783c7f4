"""Self-describing checkpoint containers.

A full checkpoint is a compressed ``.npz`` holding one flat float64
array per parameter group plus a JSON metadata record (format version,
model metadata, optional schedule descriptor). A delta checkpoint stores
a single group's parameters together with provenance: the hash of the
base checkpoint it applies to, the config it was produced under, and the
seed. Hashes are SHA-256 over the group arrays in canonical order, so
they identify parameter states independent of file encoding.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import GroupMismatchError, IntegrityError
from .models import GROUP_NAMES, ToyDenoiser, snapshot_params, write_group_vector

FORMAT_VERSION = 1


def params_hash(snapshot: dict[str, torch.Tensor]) -> str:
    """SHA-256 over the group vectors in canonical group order."""
    h = hashlib.sha256()
    for g in GROUP_NAMES:
        h.update(g.encode())
        h.update(snapshot[g].detach().cpu().numpy().astype(np.float64).tobytes())
    return h.hexdigest()


def model_hash(model) -> str:
    return params_hash(snapshot_params(model))


def save_checkpoint(path, model, schedule_descriptor: dict | None = None, extra: dict | None = None) -> str:
    """Write a full checkpoint; returns the parameter hash."""
    snap = snapshot_params(model)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "full",
        "model": model.metadata(),
        "schedule": schedule_descriptor,
        "params_hash": params_hash(snap),
    }
    if extra:
        meta["extra"] = extra
    arrays = {f"group::{g}": snap[g].numpy().astype(np.float64) for g in GROUP_NAMES}
    np.savez_compressed(str(path), __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    return meta["params_hash"]


def _read_meta(data) -> dict:
    return json.loads(bytes(data["__meta__"].tobytes()).decode())


def load_checkpoint(path, dtype=torch.float64) -> tuple[ToyDenoiser, dict]:
    """Rebuild the model from a full checkpoint; returns (model, metadata)."""
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"checkpoint missing: {path}")
    with np.load(str(path)) as data:
        meta = _read_meta(data)
        if meta.get("format_version") != FORMAT_VERSION:
            raise IntegrityError(f"unsupported checkpoint format {meta.get('format_version')!r}")
        if meta.get("kind") != "full":
            raise IntegrityError(f"expected a full checkpoint, found {meta.get('kind')!r}")
        model = ToyDenoiser.from_metadata(meta["model"], dtype=dtype)
        for g in GROUP_NAMES:
            key = f"group::{g}"
            if key not in data:
                raise GroupMismatchError(f"checkpoint lacks group {g!r}")
            write_group_vector(model, g, torch.from_numpy(data[key]))
    got = model_hash(model)
    if got != meta["params_hash"]:
        raise IntegrityError(f"checkpoint {path} hash mismatch: recorded {meta['params_hash'][:12]}, got {got[:12]}")
    return model, meta


def checkpoint_hash(path) -> str:
    """Recorded parameter hash of a checkpoint file, without rebuilding."""
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"checkpoint missing: {path}")
    with np.load(str(path)) as data:
        return _read_meta(data)["params_hash"]


def save_delta(path, model, group: str, base_hash: str, config: dict, seed: int) -> str:
    """Write a single-group delta checkpoint with provenance; returns its hash."""
    if group not in GROUP_NAMES:
        raise GroupMismatchError(f"unknown parameter group {group!r}")
    vec = torch.cat([p.detach().reshape(-1) for p in model.group_parameters(group)])
    arr = vec.numpy().astype(np.float64)
    digest = hashlib.sha256(group.encode() + arr.tobytes()).hexdigest()
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "delta",
        "group": group,
        "base_hash": base_hash,
        "config": config,
        "seed": seed,
        "delta_hash": digest,
    }
    np.savez_compressed(
        str(path),
        __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        params=arr,
    )
    return digest


def apply_delta(path, model, expected_base_hash: str | None = None) -> dict:
    """Load a delta checkpoint into ``model`` (in place); returns its metadata.

    Verifies that the delta's recorded base hash matches the model's
    current parameters (before application) unless an explicit
    ``expected_base_hash`` is supplied instead.
    """
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"delta checkpoint missing: {path}")
    with np.load(str(path)) as data:
        meta = _read_meta(data)
        if meta.get("kind") != "delta":
            raise IntegrityError(f"expected a delta checkpoint, found {meta.get('kind')!r}")
        base = expected_base_hash if expected_base_hash is not None else model_hash(model)
        if meta["base_hash"] != base:
            raise IntegrityError(
                f"delta {path.name} was trained from base {meta['base_hash'][:12]}, "
                f"but the loaded model hashes to {base[:12]}"
            )
        arr = data["params"]
        digest = hashlib.sha256(meta["group"].encode() + arr.tobytes()).hexdigest()
        if digest != meta["delta_hash"]:
            raise IntegrityError(f"delta {path.name} payload does not match its recorded hash")
        write_group_vector(model, meta["group"], torch.from_numpy(arr))
    return meta
