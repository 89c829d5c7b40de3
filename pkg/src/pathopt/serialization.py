"""Bit-exact array serialization shared by the store/model/sample files.

Float arrays are written as JSON objects carrying both a human-readable
decimal list and a canonical big-endian IEEE-754 hex string.  The hex payload
is authoritative on load, which makes save/load round-trips bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np

from .errors import SerializationError

__all__ = [
    "array_to_block",
    "block_to_array",
    "canonical_json",
    "sha256_hex",
]


def array_to_block(arr: np.ndarray) -> dict[str, Any]:
    """Encode a float64 array as ``{"shape": [...], "hex64": ..., "values": [...]}``."""
    a = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(a.shape),
        "hex64": a.astype(">f8").tobytes().hex(),
        "values": a.ravel().tolist(),
    }


def block_to_array(block: dict[str, Any], *, line: int | None = None) -> np.ndarray:
    """Decode an array block; the hex64 payload wins over the decimal values."""
    try:
        shape = tuple(int(s) for s in block["shape"])
        raw = bytes.fromhex(block["hex64"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SerializationError(f"malformed array block: {exc}", line=line) from exc
    n_expected = int(np.prod(shape, dtype=np.int64))
    if len(raw) != n_expected * 8:
        raise SerializationError(
            f"hex payload holds {len(raw) // 8} floats, shape {shape} wants {n_expected}",
            line=line,
        )
    return np.frombuffer(raw, dtype=">f8").astype("=f8").reshape(shape)


def canonical_json(obj: Any) -> str:
    """Deterministic single-line JSON used for hashing and file records."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()
