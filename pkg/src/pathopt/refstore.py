"""Reference set of correctly answered samples: build, persist, verify.

The store keeps, for every pool sample the model answered correctly at base
inference, the raw input, its unit-norm embedding, and the router-produced
pathway.  Retrieval-based optimizers borrow those pathways at test time.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from .errors import (
    DegenerateEmbeddingError,
    EmptyStoreError,
    SerializationError,
    StoreError,
)
from .serialization import array_to_block, block_to_array, canonical_json, sha256_hex

__all__ = [
    "EmbeddingProvider",
    "MeanPoolEmbedder",
    "ReferenceEntry",
    "ReferenceStore",
    "build_reference_set",
    "save_store",
    "load_store",
    "store_hash",
    "save_samples",
    "load_samples",
]

STORE_SCHEMA = 1


class EmbeddingProvider(Protocol):
    """Maps a (T, d_in) input tensor to a unit-norm embedding vector."""

    def embed(self, x: np.ndarray) -> np.ndarray: ...


class MeanPoolEmbedder:
    """Default provider: mean over tokens, then L2-normalize."""

    def embed(self, x: np.ndarray) -> np.ndarray:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"expected (tokens, dim) input, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("input contains non-finite values")
        pooled = arr.mean(axis=0)
        norm = np.linalg.norm(pooled)
        if norm < 1e-12:
            raise DegenerateEmbeddingError(
                "mean-pooled input has (near-)zero norm; cannot normalize"
            )
        return pooled / norm


@dataclass
class ReferenceEntry:
    id: int
    label: int
    input: np.ndarray      # (T, d_in)
    embedding: np.ndarray  # (d_emb,), unit norm
    pathway: np.ndarray    # (T, L, E) router pathway recorded at base inference
    meta: dict[str, str] = field(default_factory=dict)


class ReferenceStore:
    """Immutable ordered collection of :class:`ReferenceEntry`.

    ``provenance`` is free-form header metadata (model hash, seed, build
    timestamp); it round-trips through save/load untouched.
    """

    def __init__(
        self,
        entries: Sequence[ReferenceEntry],
        embedding_dim: int,
        provenance: dict[str, Any] | None = None,
    ):
        self.entries = list(entries)
        self.embedding_dim = int(embedding_dim)
        self.provenance = dict(provenance or {})
        ids = [e.id for e in self.entries]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise StoreError("entry ids must be strictly increasing")
        for e in self.entries:
            if e.embedding.shape != (self.embedding_dim,):
                raise StoreError(
                    f"entry {e.id}: embedding dim {e.embedding.shape} != {self.embedding_dim}"
                )
        self._embeddings: np.ndarray | None = None
        self._pathways: np.ndarray | None = None
        self._index_of = {e.id: i for i, e in enumerate(self.entries)}

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> np.ndarray:
        return np.asarray([e.id for e in self.entries], dtype=np.int64)

    def entry(self, entry_id: int) -> ReferenceEntry:
        return self.entries[self._index_of[entry_id]]

    def __iter__(self) -> Iterable[ReferenceEntry]:
        return iter(self.entries)

    @property
    def embeddings(self) -> np.ndarray:
        """(N, d_emb) matrix of all embeddings, cached for linear scans."""
        if self._embeddings is None:
            if self.entries:
                self._embeddings = np.stack([e.embedding for e in self.entries])
            else:
                self._embeddings = np.zeros((0, self.embedding_dim))
        return self._embeddings

    @property
    def pathways(self) -> np.ndarray:
        """(N, T, L, E) tensor of all stored pathways."""
        if self._pathways is None:
            if not self.entries:
                raise StoreError("store has no entries, no pathways to stack")
            self._pathways = np.stack([e.pathway for e in self.entries])
        return self._pathways

    def labels(self) -> np.ndarray:
        return np.asarray([e.label for e in self.entries], dtype=np.int64)


def build_reference_set(
    model,
    pool: Sequence[tuple[np.ndarray, int]],
    embedder: EmbeddingProvider | None = None,
) -> ReferenceStore:
    """Filter a labeled pool down to the samples the model answers correctly.

    Each kept sample records the base-inference pathway and its embedding.
    Raises :class:`EmptyStoreError` when the model gets nothing right.
    """
    if not pool:
        raise EmptyStoreError("pool is empty")
    embedder = embedder or MeanPoolEmbedder()
    entries: list[ReferenceEntry] = []
    for i, (x, y) in enumerate(pool):
        logits, pathway = model.forward_base(x)
        if int(np.argmax(logits)) != int(y):
            continue
        entries.append(
            ReferenceEntry(
                id=len(entries),
                label=int(y),
                input=np.asarray(x, dtype=np.float64),
                embedding=embedder.embed(x),
                pathway=pathway,
                meta={"pool_index": str(i)},
            )
        )
    if not entries:
        raise EmptyStoreError("model answered no pool sample correctly")
    provenance = {
        "model_hash": model.fingerprint(),
        "built_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "pool_size": len(pool),
    }
    plant = getattr(model, "plant", None)
    if plant is not None:
        provenance["seed"] = plant.seed
    return ReferenceStore(entries, entries[0].embedding.shape[0], provenance)


# ---------------------------------------------------------------------------
# persistence: JSON Lines, one header object then one object per entry

def save_store(store: ReferenceStore, path: str | Path) -> None:
    Path(path).write_text(_store_text(store), encoding="utf-8")


def _store_text(store: ReferenceStore) -> str:
    header = {
        "schema": STORE_SCHEMA,
        "kind": "reference-store",
        "embedding_dim": store.embedding_dim,
        "n_entries": len(store),
        "provenance": store.provenance,
    }
    lines = [canonical_json(header)]
    for e in store.entries:
        lines.append(
            canonical_json(
                {
                    "id": e.id,
                    "label": e.label,
                    "meta": e.meta,
                    "input": array_to_block(e.input),
                    "embedding": array_to_block(e.embedding),
                    "pathway": array_to_block(e.pathway),
                }
            )
        )
    return "\n".join(lines) + "\n"


def load_store(path: str | Path) -> ReferenceStore:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise SerializationError("empty file", line=1)
    header = _parse_line(lines[0], 1)
    if header.get("kind") != "reference-store" or header.get("schema") != STORE_SCHEMA:
        raise SerializationError(
            f"not a schema-{STORE_SCHEMA} reference-store header", line=1
        )
    dim = int(header["embedding_dim"])
    entries = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        rec = _parse_line(raw, lineno)
        try:
            entry = ReferenceEntry(
                id=int(rec["id"]),
                label=int(rec["label"]),
                input=block_to_array(rec["input"], line=lineno),
                embedding=block_to_array(rec["embedding"], line=lineno),
                pathway=block_to_array(rec["pathway"], line=lineno),
                meta={str(k): str(v) for k, v in rec.get("meta", {}).items()},
            )
        except KeyError as exc:
            raise SerializationError(f"record missing field {exc}", line=lineno) from exc
        if entry.embedding.shape != (dim,):
            raise SerializationError(
                f"embedding dim {entry.embedding.shape[0]} != header dim {dim}",
                line=lineno,
            )
        entries.append(entry)
    if len(entries) != int(header.get("n_entries", len(entries))):
        raise SerializationError(
            f"header promises {header['n_entries']} entries, file has {len(entries)}"
        )
    return ReferenceStore(entries, dim, header.get("provenance", {}))


def _parse_line(raw: str, lineno: int) -> dict[str, Any]:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SerializationError(f"invalid JSON: {exc.msg}", line=lineno) from exc
    if not isinstance(obj, dict):
        raise SerializationError("record is not a JSON object", line=lineno)
    return obj


def store_hash(store: ReferenceStore) -> str:
    """Content hash of the canonical serialization (used for round-trip checks)."""
    return sha256_hex(_store_text(store))


def verify_store(store: ReferenceStore, model=None) -> list[str]:
    """Return a list of invariant violations (empty when the store is sound).

    With a model, additionally re-checks that every stored (input, pathway)
    still produces the stored label under a full pathway override.
    """
    problems: list[str] = []
    for e in store.entries:
        norm = float(np.linalg.norm(e.embedding))
        if abs(norm - 1.0) > 1e-6:
            problems.append(f"entry {e.id}: embedding norm {norm:.2e} != 1")
        row_sums = e.pathway.sum(axis=-1)
        if np.max(np.abs(row_sums - 1.0)) > 1e-9:
            problems.append(f"entry {e.id}: pathway rows do not sum to 1")
        if not np.all(np.isfinite(e.input)):
            problems.append(f"entry {e.id}: non-finite input")
    if model is not None:
        from .pathway import OptimizationMask

        mask = OptimizationMask.full(model.config)
        for e in store.entries:
            logits, _ = model.forward_with_pathway(e.input, e.pathway, mask)
            if int(np.argmax(logits)) != e.label:
                problems.append(f"entry {e.id}: stored verdict no longer correct")
    return problems


# ---------------------------------------------------------------------------
# labeled sample sets (benchmark pool / test splits) share the same encoding

def save_samples(samples: Sequence[tuple[np.ndarray, int]], path: str | Path) -> None:
    first = np.asarray(samples[0][0]) if samples else np.zeros((0, 0))
    header = {
        "schema": STORE_SCHEMA,
        "kind": "sample-set",
        "n_samples": len(samples),
        "input_shape": list(first.shape),
    }
    lines = [canonical_json(header)]
    for i, (x, y) in enumerate(samples):
        lines.append(
            canonical_json({"index": i, "label": int(y), "input": array_to_block(np.asarray(x))})
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_samples(path: str | Path) -> list[tuple[np.ndarray, int]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SerializationError("empty file", line=1)
    header = _parse_line(lines[0], 1)
    if header.get("kind") != "sample-set":
        raise SerializationError("not a sample-set header", line=1)
    out: list[tuple[np.ndarray, int]] = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        rec = _parse_line(raw, lineno)
        out.append((block_to_array(rec["input"], line=lineno), int(rec["label"])))
    return out
