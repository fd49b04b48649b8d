"""Checkpoints: a JSON manifest plus one little-endian blob of parameter bytes.

The manifest lists every parameter with its shape, dtype and byte range; the
ranges tile the blob in manifest order.  Nothing time-dependent is written,
so saving the same model twice produces identical files.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import RunConfig, config_hash
from .errors import CheckpointMismatch, InvalidConfig
from .model import Transformer

FORMAT = "kepsvgp-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.bin"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": obj.dtype.str}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=np.dtype(obj["dtype"]))
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


def save(directory, model: Transformer, run_config: RunConfig, rng_state=None, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(model.config.dtype).newbyteorder("<")
    entries, chunks, offset = [], [], 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(p.data.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    snapshot = run_config.to_dict()
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "precision": model.config.precision,
        "dtype": dtype.str,
        "blob": BLOB,
        "blob_bytes": offset,
        "params": entries,
        "rng_state": _jsonable(rng_state) if rng_state is not None else None,
        "config": snapshot,
        "config_hash": config_hash(snapshot),
        "extra": extra or {},
    }
    (directory / BLOB).write_bytes(b"".join(chunks))
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def load(directory):
    """Returns ``(model, run_config, manifest)``; raises :class:`CheckpointMismatch` on any inconsistency."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
        blob = (directory / BLOB).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointMismatch(f"cannot read checkpoint at {directory}: {exc}") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint format {manifest.get('format')!r} v{manifest.get('version')}")
    try:
        run_config = RunConfig.from_dict(manifest["config"])
    except (InvalidConfig, KeyError) as exc:
        raise CheckpointMismatch(f"checkpoint config is invalid: {exc}") from None
    if config_hash(manifest["config"]) != manifest.get("config_hash"):
        raise CheckpointMismatch("config snapshot does not match its hash")
    cfg = run_config.transformer_config()
    if cfg.precision != manifest.get("precision"):
        raise CheckpointMismatch(f"precision {manifest.get('precision')!r} does not match config {cfg.precision!r}")
    dtype = np.dtype(manifest["dtype"])
    model = Transformer(cfg, seed=0)
    expected = {k: p.data.shape for k, p in model.params.items()}
    names = [e["name"] for e in manifest["params"]]
    if names != list(expected):
        raise CheckpointMismatch("parameter names differ from the model built by the config")
    offset = 0
    for e in manifest["params"]:
        shape = tuple(e["shape"])
        if shape != expected[e["name"]]:
            raise CheckpointMismatch(f"{e['name']}: shape {shape} != {expected[e['name']]}")
        if e["offset"] != offset or e["nbytes"] != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointMismatch(f"{e['name']}: byte range does not tile the blob")
        offset += e["nbytes"]
    if offset != len(blob) or offset != manifest.get("blob_bytes"):
        raise CheckpointMismatch(f"blob has {len(blob)} bytes, manifest describes {offset}")
    for e in manifest["params"]:
        arr = np.frombuffer(blob, dtype=dtype, count=e["nbytes"] // dtype.itemsize, offset=e["offset"])
        model.params[e["name"]].data = arr.reshape(e["shape"]).astype(cfg.dtype)
    return model, run_config, manifest


def rng_from_manifest(manifest):
    state = manifest.get("rng_state")
    return None if state is None else nx.rng_from_state(_from_jsonable(state))
