"""Bit-exact model serialization: JSON documents with base64-packed arrays.

Arrays round-trip through raw little-endian bytes, so reloading a model gives
back the identical float64 values (no decimal text involved).
"""
from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

_FORMAT_VERSION = 1


def _pack(obj):
    if isinstance(obj, np.ndarray):
        arr = np.ascontiguousarray(obj)
        return {
            "__ndarray__": base64.b64encode(arr.tobytes()).decode("ascii"),
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
        }
    if isinstance(obj, dict):
        return {k: _pack(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_pack(v) for v in obj]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _unpack(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            raw = base64.b64decode(obj["__ndarray__"])
            return np.frombuffer(raw, dtype=np.dtype(obj["dtype"])).reshape(obj["shape"]).copy()
        return {k: _unpack(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unpack(v) for v in obj]
    return obj


def save_model(path: str | Path, kind: str, payload: dict) -> None:
    """Write a model document; ``kind`` tags which class should rebuild it."""
    doc = {"format_version": _FORMAT_VERSION, "kind": kind, "payload": _pack(payload)}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_model(path: str | Path) -> tuple[str, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != _FORMAT_VERSION:
        raise ValueError(f"unsupported model document version {doc.get('format_version')!r}")
    return doc["kind"], _unpack(doc["payload"])
