"""Atomic file writes, the versioned JSON model envelope and the binary
feature format.

Feature files (`.pvf`) are little-endian:

    magic   4 bytes   b"PVF1"
    n       uint32    number of texts
    rows    uint32    padded token rows per text
    dim     uint32    hidden size
    cls     float32[n, dim]
    valid   int32[n]          first non-pad row per text
    tokens  float32[n, rows, dim]
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from pharmvig.errors import PharmvigError

FORMAT_VERSION = 1
_MAGIC = b"PVF1"
_HEADER = struct.Struct("<4sIII")


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write `data` to `path` so readers never observe a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path: Path, obj: Any) -> None:
    atomic_write_bytes(path, dumps_json(obj).encode("utf-8"))


def read_json(path: Path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def model_envelope(kind: str, payload: dict) -> dict:
    return {"format": f"pharmvig.{kind}", "version": FORMAT_VERSION, **payload}


def open_envelope(data: dict, kind: str) -> dict:
    """Check format/version of a serialized model and return it."""
    expected = f"pharmvig.{kind}"
    if data.get("format") != expected:
        raise PharmvigError(f"expected a {expected} document, got {data.get('format')!r}")
    if data.get("version") != FORMAT_VERSION:
        raise PharmvigError(f"unsupported {expected} version {data.get('version')!r}")
    return data


def write_feature_file(path: Path, cls_vectors: np.ndarray, valid_from: np.ndarray, tokens: np.ndarray) -> None:
    n, dim = cls_vectors.shape
    if tokens.shape[0] != n or tokens.shape[2] != dim or valid_from.shape != (n,):
        raise ValueError("feature arrays disagree on n or dim")
    rows = tokens.shape[1]
    parts = [
        _HEADER.pack(_MAGIC, n, rows, dim),
        np.ascontiguousarray(cls_vectors, dtype="<f4").tobytes(),
        np.ascontiguousarray(valid_from, dtype="<i4").tobytes(),
        np.ascontiguousarray(tokens, dtype="<f4").tobytes(),
    ]
    atomic_write_bytes(path, b"".join(parts))


def read_feature_file(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (cls_vectors, valid_from, tokens) from a `.pvf` file."""
    raw = Path(path).read_bytes()
    magic, n, rows, dim = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise PharmvigError(f"{path} is not a feature file")
    offset = _HEADER.size
    cls = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=offset).reshape(n, dim)
    offset += 4 * n * dim
    valid = np.frombuffer(raw, dtype="<i4", count=n, offset=offset)
    offset += 4 * n
    tokens = np.frombuffer(raw, dtype="<f4", count=n * rows * dim, offset=offset).reshape(n, rows, dim)
    return cls.astype(np.float32), valid.astype(np.int64), tokens.astype(np.float32)
