"""Checkpoint files: JSON manifest + f32le tensor blob + CRC-64."""

from __future__ import annotations

import os

import numpy as np

from .framing import read_framed, write_framed
from .model import ModelParams, infer_shapes

__all__ = ["save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC"]

CHECKPOINT_MAGIC = "EXGC1"


def save_checkpoint(path: str | os.PathLike, models: dict[str, ModelParams], meta: dict | None = None) -> None:
    """Write named models (e.g. ``{"G": ..., "D": ...}``) and free-form ``meta``.

    Tensors are stored in sorted (model, name) order as float32. Optimizer
    moments are not persisted.
    """
    manifest_models = {}
    chunks = []
    offset = 0
    for key in sorted(models):
        m = models[key]
        entries = []
        for name in sorted(m.tensors):
            arr = np.ascontiguousarray(m.tensors[name], dtype="<f4")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.size
        manifest_models[key] = {"arch": m.arch, "tensors": entries}
    header = {"magic": CHECKPOINT_MAGIC, "dtype": "f32le", "count": offset,
              "models": manifest_models, "meta": meta or {}}
    write_framed(path, header, b"".join(chunks))


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, ModelParams], dict]:
    header, blob = read_framed(path, CHECKPOINT_MAGIC, lambda h: 4 * int(h["count"]))
    flat = np.frombuffer(blob, dtype="<f4")
    models = {}
    for key, entry in header["models"].items():
        infer_shapes(entry["arch"])
        tensors = {}
        for t in entry["tensors"]:
            n = int(np.prod(t["shape"])) if t["shape"] else 1
            tensors[t["name"]] = flat[t["offset"]:t["offset"] + n].reshape(t["shape"]).astype(np.float32)
        models[key] = ModelParams(entry["arch"], tensors)
    return models, header.get("meta", {})
