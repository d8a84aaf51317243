"""Checkpoint container: an ``.npz`` archive of named arrays plus a JSON header.

The header lives under the reserved key ``__meta__`` and always carries
``format_version``. Arrays are stored verbatim, so a save/load round trip is
bit-exact.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_META_KEY = "__meta__"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    if _META_KEY in arrays:
        raise CheckpointError(f"{_META_KEY!r} is a reserved name")
    header = {"format_version": FORMAT_VERSION,
              "shapes": {k: list(np.shape(v)) for k, v in arrays.items()},
              **(meta or {})}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **{_META_KEY: np.array(json.dumps(header, sort_keys=True))},
                 **{k: np.asarray(v) for k, v in arrays.items()})
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if _META_KEY not in z.files:
            raise CheckpointError(f"{path} has no header; not a checkpoint")
        meta = json.loads(str(z[_META_KEY]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
        arrays = {k: z[k] for k in z.files if k != _META_KEY}
    for k, shape in meta.get("shapes", {}).items():
        if k not in arrays or list(arrays[k].shape) != shape:
            raise CheckpointError(f"{path}: entry {k!r} missing or misshapen")
    return arrays, meta
