"""Checkpoints: named parameter arrays plus JSON metadata in one .npz file."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .optim import ParamStore

__all__ = ["CheckpointError", "FORMAT_VERSION", "save_checkpoint", "load_checkpoint"]

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, store: ParamStore, meta: dict) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": store.dtype.name,
        "shapes": {name: list(t.data.shape) for name, t in store.items()},
    }
    header.update(meta)
    arrays = {f"param/{name}": t.data for name, t in store.items()}
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    """Load a checkpoint, rejecting version or shape mismatches."""
    try:
        npz = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({e})") from e
    if "__meta__" not in npz:
        raise CheckpointError(f"{path}: missing metadata entry")
    meta = json.loads(str(npz["__meta__"]))
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {meta.get('format_version')} != {FORMAT_VERSION}"
        )
    shapes = meta.get("shapes", {})
    store = ParamStore(dtype=np.dtype(meta.get("dtype", "float32")))
    for name, shape in shapes.items():
        key = f"param/{name}"
        if key not in npz:
            raise CheckpointError(f"{path}: parameter {name!r} missing")
        arr = npz[key]
        if list(arr.shape) != list(shape):
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {arr.shape}, metadata says {tuple(shape)}"
            )
        store.add(name, arr)
    extra = [k for k in npz.files if k.startswith("param/") and k[len("param/"):] not in shapes]
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {extra}")
    return store, meta
