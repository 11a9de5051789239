"""Binary checkpoint format.

Layout: 8 magic bytes, a little-endian uint64 manifest length, a JSON
manifest (sorted keys: version, model config, epoch, optimizer step, RNG
state, tensor directory with names/shapes/dtypes/offsets), then raw
little-endian tensor payloads in directory order. Saving the result of a
load produces a byte-identical file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig

MAGIC = b"MATCKPT1"
VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible with the model."""


@dataclass
class CheckpointData:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    epoch: int
    opt_state: dict | None = None   # {"step": int, "m": {name: arr}, "v": {...}}
    rng_state: dict | None = None


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "<f4"
    if arr.dtype == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def _entries(data: CheckpointData):
    for name in sorted(data.params):
        yield "param", name, data.params[name]
    if data.opt_state is not None:
        for kind in ("m", "v"):
            moments = data.opt_state[kind]
            for name in sorted(moments):
                yield f"opt_{kind}", name, moments[name]


def save_checkpoint(path, data: CheckpointData) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    directory = []
    payloads = []
    offset = 0
    for kind, name, arr in _entries(data):
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        directory.append({"kind": kind, "name": name, "shape": list(arr.shape),
                          "dtype": tag, "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    manifest = {
        "version": VERSION,
        "model_config": data.model_config.to_dict(),
        "epoch": data.epoch,
        "opt_step": None if data.opt_state is None else data.opt_state["step"],
        "rng_state": data.rng_state,
        "tensors": directory,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> CheckpointData:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    blob_len = int.from_bytes(raw[8:16], "little")
    manifest = json.loads(raw[16:16 + blob_len].decode())
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version "
                              f"{manifest.get('version')}")
    base = 16 + blob_len
    params: dict[str, np.ndarray] = {}
    moments = {"m": {}, "v": {}}
    for entry in manifest["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype=dtype, count=entry["nbytes"] // dtype.itemsize,
                            offset=start).reshape(entry["shape"]).copy()
        if entry["kind"] == "param":
            params[entry["name"]] = arr
        elif entry["kind"] == "opt_m":
            moments["m"][entry["name"]] = arr
        elif entry["kind"] == "opt_v":
            moments["v"][entry["name"]] = arr
        else:
            raise CheckpointError(f"{path}: unknown tensor kind {entry['kind']!r}")
    opt_state = None
    if manifest.get("opt_step") is not None:
        opt_state = {"step": manifest["opt_step"], "m": moments["m"], "v": moments["v"]}
    return CheckpointData(
        model_config=ModelConfig.from_dict(manifest["model_config"]),
        params=params,
        epoch=manifest["epoch"],
        opt_state=opt_state,
        rng_state=manifest.get("rng_state"),
    )


def restore_model(data: CheckpointData):
    """Build a model from the stored config and load its parameters.

    Raises CheckpointError naming the first mismatched or missing tensor.
    """
    from .predictor import MattingModel

    model = MattingModel(data.model_config, seed=0)
    store = model.store
    stored = set(data.params)
    current = set(store.names())
    if stored != current:
        missing = sorted(current - stored)
        extra = sorted(stored - current)
        raise CheckpointError(
            f"checkpoint/config architecture mismatch; missing={missing[:4]} "
            f"unexpected={extra[:4]}")
    for name, arr in data.params.items():
        tensor = store[name]
        if tuple(arr.shape) != tensor.shape:
            raise CheckpointError(
                f"checkpoint tensor {name!r} has shape {tuple(arr.shape)}, "
                f"model expects {tensor.shape}")
        tensor.data = arr.astype(data.model_config.np_dtype, copy=True)
    return model
