"""Small helpers for hashed binary blobs and canonical JSON."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace jitter)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def array_to_blob(*arrays: np.ndarray) -> bytes:
    """Concatenate arrays as little-endian float64, row-major."""
    parts = [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    return b"".join(parts)


def blob_to_array(blob: bytes, shape) -> np.ndarray:
    arr = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    return arr.reshape(shape)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
