"""scikit-learn estimator facade over per-sample pathway optimization.

``fit`` ingests a labeled pool and builds the reference store (keeping only
samples the model already answers correctly); ``predict`` then optimizes each
test sample's routing pathway at inference time.  All optimizer knobs are
flat constructor parameters so the estimator composes with scikit-learn
model selection tooling.
"""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import PathwayError
from .kernels import KernelSpec
from .model import MoEModel
from .neighborhood import NeighborhoodSpec
from .optimizers import MaskSpec, OptimizerSpec, parse_lr_schedule, parse_span, run_optimizer
from .refstore import EmbeddingProvider, build_reference_set

__all__ = ["PathwayOptimizedClassifier"]


class PathwayOptimizedClassifier(BaseEstimator, ClassifierMixin, TransformerMixin):
    """Classify by optimizing a frozen MoE model's routing per test sample.

    Parameters mirror ``OptimizerSpec`` but stay flat and string-typed where
    that helps grid search (``lr`` uses the ``cosine:1e-2:1e-5`` mini-syntax,
    ``tokens``/``layers`` use spans like ``last:3``).

    ``method='oracle'`` needs true labels and is therefore not predictable;
    use the functional API for oracle ceilings.
    """

    def __init__(
        self,
        model: MoEModel | None = None,
        method: str = "ngd",
        steps: int = 10,
        lr: str = "cosine:1e-2:1e-5",
        kernel: str = "gaussian",
        bandwidth: float | None = None,
        degree: int = 2,
        offset: float = 1.0,
        neighborhood: str = "knn",
        k: int = 3,
        epsilon: float = 0.5,
        dedup_threshold: float = 0.95,
        alpha_grid: Sequence[float] | None = None,
        meanshift_iters: int = 5,
        meanshift_alpha: float = 0.5,
        tokens: str = "last:1",
        layers: str = "last:3",
        core_experts: int | None = 8,
        embedder: EmbeddingProvider | None = None,
    ) -> None:
        self.model = model
        self.method = method
        self.steps = steps
        self.lr = lr
        self.kernel = kernel
        self.bandwidth = bandwidth
        self.degree = degree
        self.offset = offset
        self.neighborhood = neighborhood
        self.k = k
        self.epsilon = epsilon
        self.dedup_threshold = dedup_threshold
        self.alpha_grid = alpha_grid
        self.meanshift_iters = meanshift_iters
        self.meanshift_alpha = meanshift_alpha
        self.tokens = tokens
        self.layers = layers
        self.core_experts = core_experts
        self.embedder = embedder

    # ------------------------------------------------------------------

    def _build_spec(self) -> OptimizerSpec:
        tok_pos, tok_n = parse_span(self.tokens)
        lay_pos, lay_n = parse_span(self.layers)
        kwargs: dict[str, Any] = dict(
            method=self.method,
            steps=self.steps,
            lr_schedule=parse_lr_schedule(self.lr),
            meanshift_iters=self.meanshift_iters,
            meanshift_alpha=self.meanshift_alpha,
            kernel=KernelSpec(
                kind=self.kernel,
                bandwidth=self.bandwidth,
                degree=self.degree,
                offset=self.offset,
            ),
            neighborhood=NeighborhoodSpec(
                kind=self.neighborhood,
                k=self.k,
                epsilon=self.epsilon,
                dedup_threshold=self.dedup_threshold,
            ),
            mask=MaskSpec(
                token_position=tok_pos,
                token_count=tok_n,
                layer_position=lay_pos,
                layer_count=lay_n,
                core_experts=self.core_experts,
            ),
        )
        if self.alpha_grid is not None:
            kwargs["alpha_grid"] = tuple(float(a) for a in self.alpha_grid)
        return OptimizerSpec(**kwargs)

    def _as_samples(self, X: np.ndarray) -> np.ndarray:
        if self.model is None:
            raise PathwayError("a fitted MoEModel must be supplied as `model`")
        cfg = self.model.config
        d = self.model.d_model
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim == 2 and arr.shape[1] == cfg.n_tokens * d:
            arr = arr.reshape(arr.shape[0], cfg.n_tokens, d)
        if arr.ndim != 3 or arr.shape[1:] != (cfg.n_tokens, d):
            raise PathwayError(
                f"X must be (n, {cfg.n_tokens}, {d}) or (n, {cfg.n_tokens * d}), "
                f"got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise PathwayError("X contains non-finite values")
        return arr

    # ------------------------------------------------------------------

    def fit(self, X: np.ndarray, y: Sequence[int]) -> "PathwayOptimizedClassifier":
        """Build the reference store from a labeled pool."""
        arr = self._as_samples(X)
        labels = np.asarray(y)
        if labels.shape != (arr.shape[0],):
            raise PathwayError(f"y shape {labels.shape} != ({arr.shape[0]},)")
        spec = self._build_spec()  # validates all parameters up front
        pool = [(arr[i], int(labels[i])) for i in range(arr.shape[0])]
        self.store_ = build_reference_set(self.model, pool, self.embedder)
        self.spec_ = spec
        self.classes_ = np.unique(labels)
        self.n_features_in_ = int(np.prod(arr.shape[1:]))
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "store_"):
            raise NotFittedError("call fit before predict/transform")

    def _optimize_all(self, X: np.ndarray) -> list[tuple[np.ndarray, Any]]:
        self._check_fitted()
        if self.method == "oracle":
            raise PathwayError(
                "method='oracle' requires true labels and cannot predict"
            )
        arr = self._as_samples(X)
        return [
            run_optimizer(
                self.model, arr[i], self.spec_,
                store=self.store_, embedder=self.embedder,
            )
            for i in range(arr.shape[0])
        ]

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Class predictions under each sample's optimized pathway."""
        results = self._optimize_all(X)
        return np.asarray([trace.final_prediction for _, trace in results], dtype=np.int64)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        """Class logits under each sample's optimized pathway."""
        results = self._optimize_all(X)
        arr = self._as_samples(X)
        spec = self.spec_
        logits = np.empty((arr.shape[0], self.model.n_classes))
        for i, (omega, _) in enumerate(results):
            base = self.model.forward_base(arr[i])[1]
            mask = spec.mask.resolve(self.model.config, base)
            logits[i] = self.model._last_token_logits(arr[i], omega, mask)
        return logits

    def transform(self, X: np.ndarray) -> np.ndarray:
        """Optimized pathways, flattened to (n, T*L*E)."""
        results = self._optimize_all(X)
        return np.stack([omega.reshape(-1) for omega, _ in results])
