"""Canonical serialization and hashing helpers.

Every persisted document and every transaction hash flows through
``canonical_dumps`` so byte-identical state compares are meaningful.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np


def to_jsonable(value):
    """Recursively convert numpy containers to plain JSON values."""
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in sorted(value.items(), key=lambda kv: str(kv[0]))}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, float):
        return value
    return value


def canonical_dumps(value) -> str:
    """Deterministic JSON: sorted keys, compact separators."""
    return json.dumps(to_jsonable(value), sort_keys=True, separators=(",", ":"))


def sha256_of(value) -> str:
    return hashlib.sha256(canonical_dumps(value).encode("utf-8")).hexdigest()
