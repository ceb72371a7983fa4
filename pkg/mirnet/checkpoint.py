"""
checkpoint.py

Versioned JSON checkpoints of named tensors:

    {"format": "mirnet-checkpoint", "version": 1, "kind": "encoder" | "model",
     "config": {...architecture...}, "extra": {...}, "tensors": {name: {"shape", "data"}}}

Floats are written with Python's shortest round-trip repr, so a reload gives
bit-identical arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from mirnet.artifacts import read_json, write_json
from mirnet.layers import Params, param

FORMAT = "mirnet-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict[str, Any]
    tensors: dict[str, np.ndarray]
    extra: dict[str, Any] = field(default_factory=dict)

    def params(self) -> Params:
        return {name: param(array.copy()) for name, array in self.tensors.items()}


def save_checkpoint(path: Path, kind: str, params: Params, config: dict[str, Any],
                    extra: dict[str, Any] | None = None) -> Path:
    tensors = {
        name: {"shape": list(t.shape), "data": [float(v) for v in t.data.reshape(-1)]}
        for name, t in sorted(params.items())
    }
    return write_json(path, {"format": FORMAT, "version": VERSION, "kind": kind, "config": config,
                             "extra": extra or {}, "tensors": tensors}, indent=None)


def load_checkpoint(path: Path, kind: str | None = None) -> Checkpoint:
    raw = read_json(path)
    if not isinstance(raw, dict) or raw.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if raw.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {raw.get('version')!r}")
    if kind is not None and raw.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a '{kind}' checkpoint, found '{raw.get('kind')}'")
    tensors = {}
    for name, entry in raw["tensors"].items():
        data = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor '{name}' holds {data.size} values for shape {shape}")
        tensors[name] = data.reshape(shape)
    return Checkpoint(kind=raw["kind"], config=raw.get("config", {}), tensors=tensors, extra=raw.get("extra", {}))
