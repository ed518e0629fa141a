"""Checkpoint directories: ``manifest.json`` + little-endian f32 ``weights.bin``.

A checkpoint written by the trainer additionally carries ``config.json``
(the model config) and ``trainer_state.json`` with its ``moments.bin`` blob.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, SrModel, build_model
from .nn import Module

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
CONFIG = "config.json"
STORED_DTYPE = np.dtype("<f4")


def _manifest(module: Module) -> list[dict]:
    return [{"name": name, "shape": list(p.shape), "dtype": "f32"} for name, p in module.named_parameters()]


def write_blob(path: Path, arrays) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=STORED_DTYPE).tobytes())


def read_blob(path: Path, shapes) -> list[np.ndarray]:
    raw = np.fromfile(path, dtype=STORED_DTYPE)
    expected = sum(int(np.prod(s)) for s in shapes)
    if raw.size != expected:
        raise CheckpointError(f"{path} holds {raw.size} values, manifest expects {expected}")
    out, pos = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        out.append(raw[pos:pos + n].reshape(shape).copy())
        pos += n
    return out


def save_weights(module: Module, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / MANIFEST).write_text(json.dumps(_manifest(module), indent=1) + "\n")
    write_blob(directory / WEIGHTS, [p.data for _, p in module.named_parameters()])
    return directory


def load_weights(module: Module, directory) -> None:
    """Copy stored weights into ``module``; names and shapes must match exactly."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no {MANIFEST} in {directory}") from None
    params = dict(module.named_parameters())
    stored = [entry["name"] for entry in manifest]
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointError(f"checkpoint {directory} does not match the model; "
                              f"missing keys: {missing or 'none'}; extra keys: {extra or 'none'}")
    for entry in manifest:
        if list(params[entry["name"]].shape) != list(entry["shape"]):
            raise CheckpointError(f"shape mismatch for {entry['name']}: checkpoint {entry['shape']}, "
                                  f"model {list(params[entry['name']].shape)}")
    arrays = read_blob(directory / WEIGHTS, [tuple(e["shape"]) for e in manifest])
    for entry, arr in zip(manifest, arrays):
        target = params[entry["name"]]
        target.data[...] = arr.astype(target.dtype)


def save_checkpoint(model: SrModel, directory, extra: Optional[dict] = None) -> Path:
    directory = save_weights(model, directory)
    payload = model.config.to_dict()
    (directory / CONFIG).write_text(json.dumps(payload, indent=2) + "\n")
    if extra:
        for name, content in extra.items():
            (directory / name).write_text(json.dumps(content, indent=2) + "\n")
    return directory


def read_config(directory) -> ModelConfig:
    path = Path(directory) / CONFIG
    try:
        return ModelConfig.from_dict(json.loads(path.read_text()))
    except FileNotFoundError:
        raise CheckpointError(f"no {CONFIG} in {directory}") from None


def load_checkpoint(directory, cfg: Optional[ModelConfig] = None, dtype="f32") -> SrModel:
    """Rebuild a model from a checkpoint, optionally under an explicit config."""
    cfg = cfg if cfg is not None else read_config(directory)
    model = build_model(cfg, 0, dtype=dtype)
    load_weights(model, directory)
    return model


def parameter_hash(module: Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
