"""Similarity kernels used to weight retrieved neighbors.

Distance-based kernels (``gaussian``, ``matern``) consume a non-negative
distance d; similarity-based kernels (``linear``, ``polynomial``) consume a
cosine similarity s in [-1, 1].  All kernels return non-negative weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["KernelSpec", "kernel_eval", "kernel_eval_array", "resolve_bandwidth"]

KERNEL_KINDS = ("gaussian", "matern", "linear", "polynomial")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus its hyperparameters.

    ``bandwidth=None`` requests the median heuristic: at query time the
    bandwidth becomes the median of the selected neighbor distances.
    """

    kind: str = "gaussian"
    bandwidth: float | None = None
    degree: int = 2
    offset: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; want one of {KERNEL_KINDS}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.degree < 1:
            raise ValueError(f"polynomial degree must be >= 1, got {self.degree}")
        if self.offset < 0:
            raise ValueError(f"polynomial offset must be >= 0, got {self.offset}")


def resolve_bandwidth(spec: KernelSpec, distances: np.ndarray) -> float:
    """Fixed bandwidth if configured, else the median of ``distances``.

    A zero median (all candidates coincide with the query) falls back to 1.0;
    the kernel value is then 1 for every candidate, so the choice is inert.
    """
    if spec.bandwidth is not None:
        return float(spec.bandwidth)
    if distances.size == 0:
        return 1.0
    med = float(np.median(distances))
    return med if med > 0.0 else 1.0


def kernel_eval(spec: KernelSpec, distance: float, similarity: float) -> float:
    """Evaluate one kernel weight from a (distance, similarity) pair."""
    return float(
        kernel_eval_array(
            spec, np.asarray([distance], dtype=np.float64), np.asarray([similarity], dtype=np.float64)
        )[0]
    )


def kernel_eval_array(
    spec: KernelSpec,
    distances: np.ndarray,
    similarities: np.ndarray,
    bandwidth: float | None = None,
) -> np.ndarray:
    """Vectorized kernel evaluation; ``bandwidth`` overrides ``spec.bandwidth``
    and the median heuristic."""
    d = np.asarray(distances, dtype=np.float64)
    if spec.kind == "gaussian":
        sigma = bandwidth if bandwidth is not None else resolve_bandwidth(spec, d)
        return np.exp(-(d * d) / (2.0 * sigma * sigma))
    if spec.kind == "matern":
        sigma = bandwidth if bandwidth is not None else resolve_bandwidth(spec, d)
        r = math.sqrt(3.0) * d / sigma
        return (1.0 + r) * np.exp(-r)
    s = np.asarray(similarities, dtype=np.float64)
    if spec.kind == "linear":
        return np.maximum(s, 0.0)
    # polynomial
    return np.power(np.maximum(s, 0.0) + spec.offset, spec.degree)
