"""Neighbor retrieval over the reference store.

Two spaces are supported: embedding space (cosine distance between unit
embeddings, with a near-duplicate filter) and pathway space (Euclidean
distance between masked pathway slices, no dedup).  Both run an exhaustive
linear scan — stores are small enough that approximate indexing would only
add nondeterminism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import KernelSpec, kernel_eval_array, resolve_bandwidth
from .pathway import OptimizationMask, RoutingConfig
from .refstore import ReferenceStore

__all__ = ["NeighborhoodSpec", "NeighborSet", "select_neighbors", "select_pathway_neighbors"]

NEIGHBORHOOD_KINDS = ("knn", "eps_ball")


@dataclass(frozen=True)
class NeighborhoodSpec:
    """How to pick neighbors: kNN or an ε-ball, plus the dedup threshold."""

    kind: str = "knn"
    k: int = 3
    epsilon: float = 0.5
    dedup_threshold: float = 0.95
    space: str = "embedding"

    def __post_init__(self) -> None:
        if self.kind not in NEIGHBORHOOD_KINDS:
            raise ValueError(f"unknown neighborhood kind {self.kind!r}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.dedup_threshold <= 1.0:
            raise ValueError(
                f"dedup_threshold must be in (0, 1], got {self.dedup_threshold}"
            )
        if self.space not in ("embedding", "pathway"):
            raise ValueError(f"unknown neighborhood space {self.space!r}")


@dataclass(frozen=True)
class NeighborSet:
    """Selected neighbors, distance-sorted, with normalized kernel weights."""

    ids: tuple[int, ...]
    distances: np.ndarray    # ascending
    similarities: np.ndarray
    weights: np.ndarray      # sums to 1 unless the set is empty
    kernel_sum: float        # unnormalized sum of kernel values
    bandwidth: float         # bandwidth actually used (median heuristic resolved)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def is_empty(self) -> bool:
        return len(self.ids) == 0


_EMPTY = NeighborSet(
    ids=(),
    distances=np.zeros(0),
    similarities=np.zeros(0),
    weights=np.zeros(0),
    kernel_sum=0.0,
    bandwidth=1.0,
)


def _finish(
    candidate_ids: np.ndarray,
    distances: np.ndarray,
    similarities: np.ndarray,
    spec: NeighborhoodSpec,
    kernel: KernelSpec,
) -> NeighborSet:
    """Rank candidates, apply kNN/ε-ball, and attach normalized weights."""
    if candidate_ids.size == 0:
        return _EMPTY
    # Stable sort on distance: ties resolve toward the lower entry id because
    # candidate ids arrive in increasing order.
    order = np.argsort(distances, kind="stable")
    if spec.kind == "knn":
        order = order[: spec.k]
    else:
        order = order[distances[order] <= spec.epsilon]
    if order.size == 0:
        return _EMPTY
    d = distances[order]
    s = similarities[order]
    bandwidth = resolve_bandwidth(kernel, d)
    values = kernel_eval_array(kernel, d, s, bandwidth=bandwidth)
    total = float(values.sum())
    if total > 0.0:
        weights = values / total
    else:
        # All kernel values vanished (e.g. linear kernel with negative
        # similarities); fall back to uniform so downstream averages stay defined.
        weights = np.full(order.size, 1.0 / order.size)
    return NeighborSet(
        ids=tuple(int(candidate_ids[i]) for i in order),
        distances=d,
        similarities=s,
        weights=weights,
        kernel_sum=total,
        bandwidth=bandwidth,
    )


def select_neighbors(
    query_embedding: np.ndarray,
    store: ReferenceStore,
    spec: NeighborhoodSpec,
    kernel: KernelSpec,
) -> NeighborSet:
    """Embedding-space retrieval with the near-duplicate filter.

    Entries with cosine similarity above ``spec.dedup_threshold`` to the query
    are removed before selection; cosine distance d = 1 - similarity ranks the
    survivors.  An empty result is a signal, not an error — callers fall back
    to the base pathway.
    """
    if len(store) == 0:
        return _EMPTY
    q = np.asarray(query_embedding, dtype=np.float64)
    sims = store.embeddings @ q
    keep = sims <= spec.dedup_threshold
    ids = store.ids[keep]
    return _finish(ids, 1.0 - sims[keep], sims[keep], spec, kernel)


def select_pathway_neighbors(
    omega: np.ndarray,
    store: ReferenceStore,
    mask: OptimizationMask,
    config: RoutingConfig,
    spec: NeighborhoodSpec,
    kernel: KernelSpec,
    candidates: np.ndarray | None = None,
) -> NeighborSet:
    """Pathway-space retrieval over masked entries (no dedup filter).

    Distance is Euclidean between masked slices; similarity (for the
    similarity-consuming kernels) is the cosine between the same slices.
    ``candidates`` may carry the precomputed ``store.pathways[:, sel]`` slice
    so repeated queries under one mask skip the gather.
    """
    if len(store) == 0:
        return _EMPTY
    sel = mask.bool_array(config)
    q = np.asarray(omega, dtype=np.float64)[sel]
    if candidates is None:
        candidates = store.pathways[:, sel]
    diff = candidates - q
    distances = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    qn = np.linalg.norm(q)
    cn = np.linalg.norm(candidates, axis=1)
    denom = qn * cn
    sims = np.divide(
        candidates @ q,
        denom,
        out=np.zeros(len(store)),
        where=denom > 0,
    )
    return _finish(store.ids, distances, sims, spec, kernel)
