"""Per-sample pathway optimizers and their learning-rate schedules.

Four strategies share one masked-update contract (entries outside the mask
are never touched, bit for bit):

* ``oracle``             — gradient descent on the true-label loss (ceiling).
* ``ngd``                — gradient descent on the kernel-weighted losses of
                           the sample's reference-set neighbors (label-free).
* ``kernel_regression``  — one-shot kernel-weighted average of neighbor
                           pathways, blended with the base pathway at the
                           grid α that minimizes the neighbor surrogate.
* ``mode_finding``       — meanshift toward the densest region of stored
                           pathways, measured in masked pathway space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PathwayError, StoreError
from .kernels import KernelSpec, kernel_eval_array
from .model import MoEModel
from .neighborhood import (
    NeighborhoodSpec,
    NeighborSet,
    select_neighbors,
    select_pathway_neighbors,
)
from .pathway import (
    OptimizationMask,
    RoutingConfig,
    apply_masked_update,
    masked_distance,
    validate_pathway,
)
from .refstore import EmbeddingProvider, MeanPoolEmbedder, ReferenceStore
from .serialization import sha256_hex

__all__ = [
    "LR_KINDS",
    "METHODS",
    "LRSchedule",
    "lr_at",
    "parse_lr_schedule",
    "MaskSpec",
    "parse_span",
    "OptimizerSpec",
    "StepRecord",
    "OptimizationTrace",
    "optimize_oracle",
    "optimize_ngd",
    "optimize_kernel_regression",
    "optimize_mode_finding",
    "run_optimizer",
]

LR_KINDS = ("fixed", "step_decay", "cosine")
METHODS = ("none", "oracle", "ngd", "kernel_regression", "mode_finding")
MEANSHIFT_TOL = 1e-8


# ---------------------------------------------------------------------------
# learning-rate schedules


@dataclass(frozen=True)
class LRSchedule:
    """fixed(λ), step_decay(λ0, factor, every), or cosine(λ_start → λ_end)."""

    kind: str = "cosine"
    base_lr: float = 1e-2
    end_lr: float = 1e-5
    factor: float = 0.5
    every: int = 1

    def __post_init__(self) -> None:
        if self.kind not in LR_KINDS:
            raise ValueError(f"unknown schedule {self.kind!r}; choose from {LR_KINDS}")
        if not self.base_lr > 0 or not self.end_lr > 0:
            raise ValueError("learning rates must be positive")
        if not self.factor > 0:
            raise ValueError("step_decay factor must be positive")
        if self.every < 1:
            raise ValueError("step_decay interval must be >= 1")


def lr_at(schedule: LRSchedule, t: int, total: int) -> float:
    """Learning rate at step ``t`` of ``total``."""
    if total < 1:
        raise ValueError("total steps must be >= 1")
    if not 0 <= t < total:
        raise ValueError(f"step {t} outside [0, {total})")
    if schedule.kind == "fixed":
        return schedule.base_lr
    if schedule.kind == "step_decay":
        return schedule.base_lr * schedule.factor ** (t // schedule.every)
    if total == 1:
        return schedule.base_lr
    span = schedule.base_lr - schedule.end_lr
    return schedule.end_lr + 0.5 * span * (1.0 + math.cos(math.pi * t / (total - 1)))


def parse_lr_schedule(text: str) -> LRSchedule:
    """Parse ``fixed:1e-3`` / ``step:1e-2[:factor[:every]]`` / ``cosine[:start[:end]]``."""
    parts = text.strip().split(":")
    kind = parts[0].lower()
    args = parts[1:]
    try:
        if kind == "fixed":
            if len(args) != 1:
                raise ValueError("fixed takes exactly one rate, e.g. fixed:1e-3")
            return LRSchedule(kind="fixed", base_lr=float(args[0]))
        if kind in ("step", "step_decay"):
            if not 1 <= len(args) <= 3:
                raise ValueError("step takes 1-3 args: step:<lr>[:factor[:every]]")
            return LRSchedule(
                kind="step_decay",
                base_lr=float(args[0]),
                factor=float(args[1]) if len(args) > 1 else 0.5,
                every=int(args[2]) if len(args) > 2 else 1,
            )
        if kind == "cosine":
            if len(args) > 2:
                raise ValueError("cosine takes at most 2 args: cosine[:start[:end]]")
            return LRSchedule(
                kind="cosine",
                base_lr=float(args[0]) if len(args) > 0 else 1e-2,
                end_lr=float(args[1]) if len(args) > 1 else 1e-5,
            )
    except ValueError as exc:
        raise ValueError(f"bad schedule {text!r}: {exc}") from exc
    raise ValueError(f"unknown schedule kind {kind!r} in {text!r}")


# ---------------------------------------------------------------------------
# mask templates

_POSITIONS = ("first", "middle", "last")


def parse_span(text: str) -> tuple[str, int]:
    """Parse a ``position:count`` span such as ``last:3`` or ``first:1``."""
    pos, _, count = text.strip().partition(":")
    if pos not in _POSITIONS or not count:
        raise ValueError(f"span must look like 'last:3', got {text!r}")
    n = int(count)
    if n < 1:
        raise ValueError(f"span count must be >= 1, got {n}")
    return pos, n


def _span_indices(position: str, count: int, size: int) -> tuple[int, ...]:
    count = min(count, size)
    if position == "first":
        start = 0
    elif position == "last":
        start = size - count
    else:
        start = (size - count) // 2
    return tuple(range(start, start + count))


@dataclass(frozen=True)
class MaskSpec:
    """Template for per-sample optimization masks.

    Resolved against a sample's base pathway: the span fields pick which
    token and layer rows to optimize, and ``core_experts`` restricts each
    masked row to its top-n experts by base routing weight (``None`` = all).
    """

    token_position: str = "last"
    token_count: int = 1
    layer_position: str = "last"
    layer_count: int = 3
    core_experts: int | None = 8

    def __post_init__(self) -> None:
        if self.token_position not in _POSITIONS or self.layer_position not in _POSITIONS:
            raise ValueError(f"positions must be one of {_POSITIONS}")
        if self.token_count < 1 or self.layer_count < 1:
            raise ValueError("token_count and layer_count must be >= 1")
        if self.core_experts is not None and self.core_experts < 1:
            raise ValueError("core_experts must be >= 1 or None")

    def resolve(
        self, config: RoutingConfig, base_pathway: np.ndarray
    ) -> OptimizationMask:
        base = validate_pathway(base_pathway, config)
        tokens = _span_indices(self.token_position, self.token_count, config.n_tokens)
        layers = _span_indices(self.layer_position, self.layer_count, config.n_layers)
        if self.core_experts is None or self.core_experts >= config.n_experts:
            core = None
        else:
            core = {}
            for l in layers:
                row = base[list(tokens), l, :].mean(axis=0)
                order = np.argsort(-row, kind="stable")[: self.core_experts]
                core[l] = tuple(sorted(int(e) for e in order))
        return OptimizationMask(tokens=tokens, layers=layers, core_experts=core)


# ---------------------------------------------------------------------------
# optimizer spec and traces


@dataclass(frozen=True)
class OptimizerSpec:
    method: str = "ngd"
    steps: int = 10
    lr_schedule: LRSchedule = field(default_factory=LRSchedule)
    alpha_grid: tuple[float, ...] = tuple(i / 10 for i in range(11))
    meanshift_iters: int = 5
    meanshift_alpha: float = 0.5
    kernel: KernelSpec = field(default_factory=KernelSpec)
    neighborhood: NeighborhoodSpec = field(default_factory=NeighborhoodSpec)
    mask: MaskSpec = field(default_factory=MaskSpec)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        grid = tuple(float(a) for a in self.alpha_grid)
        if any(not 0.0 <= a <= 1.0 for a in grid):
            raise ValueError("alpha_grid values must lie in [0, 1]")
        if 0.0 not in grid or 1.0 not in grid:
            raise ValueError("alpha_grid must contain both 0 and 1")
        object.__setattr__(self, "alpha_grid", grid)
        if self.meanshift_iters < 1:
            raise ValueError("meanshift_iters must be >= 1")
        if not 0.0 <= self.meanshift_alpha <= 1.0:
            raise ValueError("meanshift_alpha must lie in [0, 1]")


@dataclass(frozen=True)
class StepRecord:
    """One optimizer step.

    ``loss`` is the objective used to drive the step: for gradient methods
    the (surrogate) loss at the pre-update iterate; for kernel regression the
    surrogate at this candidate α (stored in ``lr``); for mode finding the
    kernel density at the post-update iterate.  ``prediction`` is the model's
    argmax under the post-update pathway.
    """

    step: int
    loss: float
    lr: float
    pathway_hash: str
    prediction: int


@dataclass
class OptimizationTrace:
    method: str
    records: list[StepRecord]
    base_prediction: int
    final_prediction: int
    no_neighbors: bool = False
    neighbor_ids: tuple[int, ...] = ()
    alpha_star: float | None = None
    forwards_used: int = 0


def _hash_pathway(omega: np.ndarray) -> str:
    return sha256_hex(np.ascontiguousarray(omega, dtype=np.float64).tobytes())[:16]


def _argmax(logits: np.ndarray) -> int:
    return int(np.argmax(logits))


def _neighbor_samples(
    store: ReferenceStore, neighbors: NeighborSet
) -> list[tuple[float, np.ndarray, int]]:
    out = []
    for w, entry_id in zip(neighbors.weights, neighbors.ids):
        entry = store.entry(int(entry_id))
        out.append((float(w), entry.input, entry.label))
    return out


# ---------------------------------------------------------------------------
# optimizers


def optimize_oracle(
    model: MoEModel, x: np.ndarray, y: int, spec: OptimizerSpec
) -> tuple[np.ndarray, OptimizationTrace]:
    """Gradient descent on the true-label loss over masked pathway entries."""
    cfg = model.config
    logits, base = model.forward_base(x)
    forwards = 1
    base_pred = _argmax(logits)
    mask = spec.mask.resolve(cfg, base)
    omega = base.copy()
    records: list[StepRecord] = []
    pred = base_pred
    for t in range(spec.steps):
        lam = lr_at(spec.lr_schedule, t, spec.steps)
        loss, grad = model.loss_and_grad(x, y, omega, mask)
        forwards += 1
        omega = apply_masked_update(omega, -lam * grad, mask, cfg)
        pred = _argmax(model._last_token_logits(x, omega, mask))
        forwards += 1
        records.append(StepRecord(t, loss, lam, _hash_pathway(omega), pred))
    trace = OptimizationTrace(
        method="oracle",
        records=records,
        base_prediction=base_pred,
        final_prediction=pred,
        forwards_used=forwards,
    )
    return omega, trace


def _empty_neighborhood_trace(
    method: str, base_pred: int, forwards: int
) -> OptimizationTrace:
    return OptimizationTrace(
        method=method,
        records=[],
        base_prediction=base_pred,
        final_prediction=base_pred,
        no_neighbors=True,
        forwards_used=forwards,
    )


def _embedding_neighbors(
    model: MoEModel,
    x: np.ndarray,
    store: ReferenceStore,
    spec: OptimizerSpec,
    embedder: EmbeddingProvider | None,
) -> NeighborSet:
    provider = embedder if embedder is not None else MeanPoolEmbedder()
    q = provider.embed(np.asarray(x, dtype=np.float64))
    if q.shape != (store.embedding_dim,):
        raise StoreError(
            f"query embedding dim {q.shape} does not match store dim "
            f"({store.embedding_dim},)"
        )
    return select_neighbors(q, store, spec.neighborhood, spec.kernel)


def optimize_ngd(
    model: MoEModel,
    x: np.ndarray,
    store: ReferenceStore,
    spec: OptimizerSpec,
    embedder: EmbeddingProvider | None = None,
) -> tuple[np.ndarray, OptimizationTrace]:
    """Gradient descent on the kernel-weighted neighbor losses (label-free).

    Neighbors are retrieved once (the sample's embedding never changes); the
    shared pathway variable overrides each neighbor's routing at the same
    masked positions it overrides for the test sample.
    """
    cfg = model.config
    logits, base = model.forward_base(x)
    forwards = 1
    base_pred = _argmax(logits)
    mask = spec.mask.resolve(cfg, base)
    neighbors = _embedding_neighbors(model, x, store, spec, embedder)
    if neighbors.is_empty:
        return base.copy(), _empty_neighborhood_trace("ngd", base_pred, forwards)
    samples = _neighbor_samples(store, neighbors)
    batch = None
    if len(samples) > 1:  # a single neighbor keeps the exact scalar path
        batch = (
            np.stack([s[1] for s in samples]),
            np.array([s[2] for s in samples], dtype=np.int64),
            np.array([s[0] for s in samples]),
        )

    omega = base.copy()
    records: list[StepRecord] = []
    pred = base_pred
    for t in range(spec.steps):
        lam = lr_at(spec.lr_schedule, t, spec.steps)
        if batch is not None:
            loss, grad = model._batch_loss_and_grad(*batch, omega, mask)
            forwards += len(samples)
        else:
            loss = 0.0
            grad = np.zeros(cfg.pathway_shape)
            for w_i, x_i, y_i in samples:
                loss_i, grad_i = model.loss_and_grad(x_i, y_i, omega, mask)
                forwards += 1
                loss += w_i * loss_i
                grad += w_i * grad_i
        omega = apply_masked_update(omega, -lam * grad, mask, cfg)
        pred = _argmax(model._last_token_logits(x, omega, mask))
        forwards += 1
        records.append(StepRecord(t, loss, lam, _hash_pathway(omega), pred))
    trace = OptimizationTrace(
        method="ngd",
        records=records,
        base_prediction=base_pred,
        final_prediction=pred,
        neighbor_ids=tuple(int(i) for i in neighbors.ids),
        forwards_used=forwards,
    )
    return omega, trace


def optimize_kernel_regression(
    model: MoEModel,
    x: np.ndarray,
    store: ReferenceStore,
    spec: OptimizerSpec,
    embedder: EmbeddingProvider | None = None,
) -> tuple[np.ndarray, OptimizationTrace]:
    """Kernel-weighted neighbor-pathway average, blended with base at the
    surrogate-minimizing α (ties break toward larger α, i.e. closer to base)."""
    cfg = model.config
    x_arr = np.asarray(x, dtype=np.float64)
    logits, base = model.forward_base(x_arr)
    forwards = 1
    base_pred = _argmax(logits)
    mask = spec.mask.resolve(cfg, base)
    neighbors = _embedding_neighbors(model, x_arr, store, spec, embedder)
    if neighbors.is_empty:
        return base.copy(), _empty_neighborhood_trace(
            "kernel_regression", base_pred, forwards
        )
    samples = _neighbor_samples(store, neighbors)
    sel = mask.bool_array(cfg)

    stacked = np.stack([store.entry(int(i)).pathway for i in neighbors.ids])
    omega_hat = np.einsum("i,itle->tle", neighbors.weights, stacked)

    grid = sorted(spec.alpha_grid)
    n_alpha, n_nb = len(grid), len(samples)
    cands = np.repeat(base[None], n_alpha, axis=0)
    for i, alpha in enumerate(grid):
        cands[i][sel] = alpha * base[sel] + (1.0 - alpha) * omega_hat[sel]

    # surrogate losses for every (alpha, neighbor) pair in one batched forward
    xs = np.stack([s[1] for s in samples])
    nb_w = np.array([s[0] for s in samples])
    nb_y = np.array([s[2] for s in samples], dtype=np.int64)
    logit_rows = model._batch_last_token_logits(
        np.tile(xs, (n_alpha, 1, 1)), np.repeat(cands, n_nb, axis=0), mask
    ).reshape(n_alpha, n_nb, -1)
    forwards += n_alpha * n_nb
    m = logit_rows.max(axis=2)
    lse = np.log(np.exp(logit_rows - m[:, :, None]).sum(axis=2)) + m
    ces = lse - logit_rows[:, np.arange(n_nb), nb_y]
    losses = ces @ nb_w  # (n_alpha,)

    pred_rows = model._batch_last_token_logits(
        np.broadcast_to(x_arr, (n_alpha,) + x_arr.shape), cands, mask
    )
    forwards += n_alpha

    records: list[StepRecord] = []
    best_alpha = None
    best_loss = math.inf
    best_pathway = None
    best_pred = base_pred
    for step, alpha in enumerate(grid):
        loss = float(losses[step])
        pred = _argmax(pred_rows[step])
        records.append(StepRecord(step, loss, alpha, _hash_pathway(cands[step]), pred))
        if loss <= best_loss:  # ascending grid, so ties land on the larger α
            best_loss, best_alpha, best_pathway, best_pred = (
                loss,
                alpha,
                cands[step],
                pred,
            )
    trace = OptimizationTrace(
        method="kernel_regression",
        records=records,
        base_prediction=base_pred,
        final_prediction=best_pred,
        neighbor_ids=tuple(int(i) for i in neighbors.ids),
        alpha_star=best_alpha,
        forwards_used=forwards,
    )
    return best_pathway, trace


def optimize_mode_finding(
    model: MoEModel,
    x: np.ndarray,
    store: ReferenceStore,
    spec: OptimizerSpec,
) -> tuple[np.ndarray, OptimizationTrace]:
    """Meanshift in masked pathway space toward dense regions of the store.

    Each iteration re-selects neighbors around the current iterate, moves
    ``(1 - meanshift_alpha)`` of the way to their kernel-weighted mean, and
    stops early once the masked movement drops below ``MEANSHIFT_TOL``.
    """
    cfg = model.config
    logits, base = model.forward_base(x)
    forwards = 1
    base_pred = _argmax(logits)
    mask = spec.mask.resolve(cfg, base)
    sel = mask.bool_array(cfg)

    omega = base.copy()
    records: list[StepRecord] = []
    pred = base_pred
    seen_ids: tuple[int, ...] = ()
    candidates = store.pathways[:, sel] if len(store) else None
    for it in range(spec.meanshift_iters):
        neighbors = select_pathway_neighbors(
            omega, store, mask, cfg, spec.neighborhood, spec.kernel, candidates
        )
        if neighbors.is_empty:
            if it == 0:
                return base.copy(), _empty_neighborhood_trace(
                    "mode_finding", base_pred, forwards
                )
            break  # neighborhood emptied mid-run; keep the current iterate
        seen_ids = tuple(int(i) for i in neighbors.ids)
        stacked = np.stack([store.entry(int(i)).pathway for i in neighbors.ids])
        omega_bar = np.einsum("i,itle->tle", neighbors.weights, stacked)
        new = omega.copy()
        new[sel] = spec.meanshift_alpha * omega[sel] + (
            1.0 - spec.meanshift_alpha
        ) * omega_bar[sel]
        density = _pathway_density(
            new, store, mask, cfg, spec, neighbors.bandwidth, candidates
        )
        pred = _argmax(model._last_token_logits(x, new, mask))
        forwards += 1
        records.append(
            StepRecord(it, density, spec.meanshift_alpha, _hash_pathway(new), pred)
        )
        moved = masked_distance(new, omega, mask, cfg)
        omega = new
        if moved < MEANSHIFT_TOL:
            break
    trace = OptimizationTrace(
        method="mode_finding",
        records=records,
        base_prediction=base_pred,
        final_prediction=pred,
        neighbor_ids=seen_ids,
        forwards_used=forwards,
    )
    return omega, trace


def _pathway_density(
    omega: np.ndarray,
    store: ReferenceStore,
    mask: OptimizationMask,
    config: RoutingConfig,
    spec: OptimizerSpec,
    bandwidth: float,
    candidates: np.ndarray | None = None,
) -> float:
    """Σ of kernel values between ``omega`` and that iterate's own neighbors."""
    neighbors = select_pathway_neighbors(
        omega, store, mask, config, spec.neighborhood, spec.kernel, candidates
    )
    if neighbors.is_empty:
        return 0.0
    if spec.kernel.kind in ("gaussian", "matern"):
        vals = kernel_eval_array(
            spec.kernel, neighbors.distances, neighbors.similarities, bandwidth
        )
    else:
        vals = kernel_eval_array(
            spec.kernel, neighbors.distances, neighbors.similarities
        )
    return float(vals.sum())


# ---------------------------------------------------------------------------
# dispatch


def run_optimizer(
    model: MoEModel,
    x: np.ndarray,
    spec: OptimizerSpec,
    store: ReferenceStore | None = None,
    y: int | None = None,
    embedder: EmbeddingProvider | None = None,
) -> tuple[np.ndarray, OptimizationTrace]:
    """Dispatch on ``spec.method``; ``none`` returns the base pathway as-is."""
    if spec.method == "none":
        logits, base = model.forward_base(x)
        pred = _argmax(logits)
        trace = OptimizationTrace(
            method="none",
            records=[],
            base_prediction=pred,
            final_prediction=pred,
            forwards_used=1,
        )
        return base, trace
    if spec.method == "oracle":
        if y is None:
            raise PathwayError("oracle optimization requires the true label")
        return optimize_oracle(model, x, int(y), spec)
    if store is None:
        raise PathwayError(f"method {spec.method!r} requires a reference store")
    if spec.method == "ngd":
        return optimize_ngd(model, x, store, spec, embedder)
    if spec.method == "kernel_regression":
        return optimize_kernel_regression(model, x, store, spec, embedder)
    return optimize_mode_finding(model, x, store, spec)
