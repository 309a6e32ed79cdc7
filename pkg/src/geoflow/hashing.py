"""Canonical JSON encoding and stable digests for configs and arrays."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from typing import Any

import numpy as np


def to_plain(obj: Any) -> Any:
    """Dataclasses, tuples and numpy scalars as JSON-ready builtins."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "model_dump"):
        return to_plain(obj.model_dump())
    return obj


def canonical_json(obj: Any) -> str:
    # repr-exact floats, sorted keys, no whitespace: equal configs give equal text
    return json.dumps(to_plain(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj: Any, length: int = 16) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:length]


def array_digest(*arrays: np.ndarray, length: int = 16) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str((a.dtype.str, a.shape)).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:length]
