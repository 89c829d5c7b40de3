"""Routing pathways, top-k sparsification, and masked pathway arithmetic.

A *pathway* is a dense float64 array of shape (n_tokens, n_layers, n_experts)
holding per-token, per-layer routing weights before top-k sparsification.
Optimizers edit pathways only inside an :class:`OptimizationMask`; everything
outside the mask must stay bit-identical to the base pathway.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PathwayError

__all__ = [
    "RoutingConfig",
    "OptimizationMask",
    "SparseRouting",
    "validate_pathway",
    "sparsify_topk",
    "sparsify_pathway",
    "apply_masked_update",
    "masked_distance",
]


@dataclass(frozen=True)
class RoutingConfig:
    """Shape of the routed model: tokens, layers, experts, active experts."""

    n_tokens: int = 4
    n_layers: int = 6
    n_experts: int = 16
    top_k: int = 4

    def __post_init__(self) -> None:
        for name in ("n_tokens", "n_layers", "n_experts", "top_k"):
            if getattr(self, name) < 1:
                raise PathwayError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.top_k > self.n_experts:
            raise PathwayError(
                f"top_k={self.top_k} exceeds n_experts={self.n_experts}"
            )

    @property
    def pathway_shape(self) -> tuple[int, int, int]:
        return (self.n_tokens, self.n_layers, self.n_experts)


def validate_pathway(pathway: np.ndarray, config: RoutingConfig) -> np.ndarray:
    """Check shape/dtype/finiteness and return the array as float64."""
    arr = np.asarray(pathway, dtype=np.float64)
    if arr.shape != config.pathway_shape:
        raise PathwayError(
            f"pathway shape {arr.shape} != expected {config.pathway_shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise PathwayError("pathway contains non-finite entries")
    return arr


@dataclass(frozen=True)
class OptimizationMask:
    """The set of (token, layer, expert) routing entries an optimizer may edit.

    ``core_experts`` maps each masked layer to the expert indices that may be
    touched there; every masked layer must appear as a key and the index sets
    must share one size.
    """

    tokens: tuple[int, ...]
    layers: tuple[int, ...]
    core_experts: dict[int, tuple[int, ...]] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not self.tokens or not self.layers:
            raise PathwayError("mask needs at least one token and one layer")
        if sorted(set(self.tokens)) != list(self.tokens):
            raise PathwayError("mask tokens must be sorted and unique")
        if sorted(set(self.layers)) != list(self.layers):
            raise PathwayError("mask layers must be sorted and unique")
        if self.core_experts is None:
            return
        if set(self.core_experts) != set(self.layers):
            raise PathwayError("core_experts keys must equal the masked layers")
        sizes = {len(v) for v in self.core_experts.values()}
        if len(sizes) != 1 or 0 in sizes:
            raise PathwayError("core expert sets must be non-empty and same-sized")
        for layer, experts in self.core_experts.items():
            if sorted(set(experts)) != list(experts):
                raise PathwayError(f"core experts for layer {layer} not sorted/unique")

    def validate_bounds(self, config: RoutingConfig) -> None:
        if self.tokens[-1] >= config.n_tokens or self.tokens[0] < 0:
            raise PathwayError(f"mask tokens {self.tokens} out of range")
        if self.layers[-1] >= config.n_layers or self.layers[0] < 0:
            raise PathwayError(f"mask layers {self.layers} out of range")
        for layer, experts in (self.core_experts or {}).items():
            if experts[-1] >= config.n_experts or experts[0] < 0:
                raise PathwayError(f"core experts for layer {layer} out of range")

    def bool_array(self, config: RoutingConfig) -> np.ndarray:
        """Dense boolean (T, L, E) array, True on editable entries.

        ``core_experts=None`` leaves every expert editable at masked rows.
        The result is cached per config; treat it as read-only.
        """
        cache = getattr(self, "_bool_cache", None)
        if cache is None:
            cache = {}
            object.__setattr__(self, "_bool_cache", cache)
        cached = cache.get(config)
        if cached is not None:
            return cached
        self.validate_bounds(config)
        out = np.zeros(config.pathway_shape, dtype=bool)
        for t in self.tokens:
            for layer in self.layers:
                if self.core_experts is None:
                    out[t, layer, :] = True
                else:
                    out[t, layer, list(self.core_experts[layer])] = True
        cache[config] = out
        return out

    def covers_row(self, token: int, layer: int) -> bool:
        return token in self.tokens and layer in self.layers

    @classmethod
    def full(cls, config: RoutingConfig) -> "OptimizationMask":
        """Mask covering every routing entry of the model."""
        return cls(
            tokens=tuple(range(config.n_tokens)),
            layers=tuple(range(config.n_layers)),
        )


@dataclass(frozen=True)
class SparseRouting:
    """Top-k routing actually used by a forward pass.

    ``indices[t, l]`` holds the k selected expert ids (highest weight first)
    and ``weights[t, l]`` the matching renormalized mixture weights.
    """

    indices: np.ndarray  # (T, L, k) int64
    weights: np.ndarray  # (T, L, k) float64

    def to_dense(self, n_experts: int) -> np.ndarray:
        t, l, _ = self.indices.shape
        dense = np.zeros((t, l, n_experts), dtype=np.float64)
        rows_t, rows_l = np.meshgrid(np.arange(t), np.arange(l), indexing="ij")
        dense[rows_t[..., None], rows_l[..., None], self.indices] = self.weights
        return dense


def sparsify_topk(row: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the k largest entries of a routing row and renormalize them.

    Ties are broken toward the lower expert index.  Negative survivors (which
    can appear transiently during gradient updates) are clamped to zero before
    renormalizing; if no kept entry is positive the result is uniform 1/k over
    the kept indices.

    Returns ``(indices, weights)``, both of length k, highest weight first.
    """
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise PathwayError(f"expected a 1-D routing row, got shape {row.shape}")
    if not 1 <= k <= row.shape[0]:
        raise PathwayError(f"k={k} invalid for row of length {row.shape[0]}")
    if not np.all(np.isfinite(row)):
        raise PathwayError("routing row contains non-finite entries")

    # Stable sort on the negated row: descending value, ties -> lower index.
    order = np.argsort(-row, kind="stable")[:k]
    kept = row[order]
    clamped = np.maximum(kept, 0.0)
    total = clamped.sum()
    if total > 0.0:
        weights = clamped / total
    else:
        weights = np.full(k, 1.0 / k)
    return order.astype(np.int64), weights


def sparsify_pathway(pathway: np.ndarray, config: RoutingConfig) -> SparseRouting:
    """Apply :func:`sparsify_topk` to every (token, layer) row."""
    arr = validate_pathway(pathway, config)
    t, l, _ = arr.shape
    k = config.top_k
    indices = np.empty((t, l, k), dtype=np.int64)
    weights = np.empty((t, l, k), dtype=np.float64)
    for ti in range(t):
        for li in range(l):
            indices[ti, li], weights[ti, li] = sparsify_topk(arr[ti, li], k)
    return SparseRouting(indices=indices, weights=weights)


def apply_masked_update(
    pathway: np.ndarray,
    delta: np.ndarray,
    mask: OptimizationMask,
    config: RoutingConfig,
) -> np.ndarray:
    """Return ``pathway + delta`` on masked entries, bit-identical elsewhere."""
    base = validate_pathway(pathway, config)
    step = np.asarray(delta, dtype=np.float64)
    if step.shape != base.shape:
        raise PathwayError(f"delta shape {step.shape} != pathway shape {base.shape}")
    out = base.copy()
    sel = mask.bool_array(config)
    out[sel] += step[sel]
    return out


def masked_distance(
    a: np.ndarray, b: np.ndarray, mask: OptimizationMask, config: RoutingConfig
) -> float:
    """Euclidean distance between two pathways restricted to masked entries."""
    lhs = validate_pathway(a, config)
    rhs = validate_pathway(b, config)
    sel = mask.bool_array(config)
    return float(np.linalg.norm(lhs[sel] - rhs[sel]))
