"""Desk-scale sparse mixture-of-experts classifier and its planted benchmark.

The network: per layer, a linear router scores E experts for each token's
hidden state, the top-k experts (two-layer tanh MLPs) run, and their weighted
outputs are added residually.  Class logits read the last token's final
hidden state.  Tokens never interact, so only the last token's routing can
move the prediction — which is exactly what the masked optimizers exploit.

``generate_planted_benchmark`` constructs instances where a known per-cluster
pathway is correct by construction while the router reproduces that pathway
only up to injected logit noise, giving a controllable base-vs-oracle gap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import NumericError, PathwayError, SerializationError
from .pathway import (
    OptimizationMask,
    RoutingConfig,
    SparseRouting,
    sparsify_topk,
    validate_pathway,
)
from .serialization import array_to_block, block_to_array, canonical_json, sha256_hex

__all__ = [
    "MoEModel",
    "PlantSpec",
    "PlantRecord",
    "cross_entropy",
    "generate_planted_benchmark",
    "save_model",
    "load_model",
]

MODEL_SCHEMA = 1


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """Cross-entropy of softmax(logits) at ``label`` (natural log)."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.shape[0]:
        raise ValueError(f"label {label} out of range for {z.shape[0]} classes")
    m = float(z.max())
    return float(m + math.log(np.exp(z - m).sum()) - z[label])


@dataclass(frozen=True)
class PlantSpec:
    """Recipe for a planted benchmark instance.

    ``router_noise`` (η) controls how badly the router deviates from the
    planted pathway; ``noise_profile`` distributes that noise across layers
    (``None`` selects a late-heavy default so the suboptimality concentrates
    where the default optimization mask can reach it).  The remaining scale
    knobs were tuned once against the acceptance thresholds and frozen.
    """

    n_clusters: int = 8
    router_noise: float = 0.5
    pool_size: int = 2000
    test_size: int = 500
    d_model: int = 16
    hidden_width: int = 8
    n_classes: int = 4
    center_scale: float = 4.0
    jitter_scale: float = 0.5
    token_jitter: float = 0.125
    plant_gap: float = 1.0
    sat_gain: float = 2.0
    expert_gain: float = 8.0
    logit_scale: float = 12.0
    label_margin: float = 4.0
    noise_profile: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.n_clusters < 2:
            raise ValueError("need at least 2 clusters")
        if self.router_noise < 0:
            raise ValueError("router_noise must be >= 0")
        if self.pool_size < 1 or self.test_size < 1:
            raise ValueError("pool_size and test_size must be >= 1")

    def resolved_profile(self, n_layers: int) -> np.ndarray:
        if self.noise_profile is not None:
            prof = np.asarray(self.noise_profile, dtype=np.float64)
            if prof.shape != (n_layers,):
                raise ValueError(
                    f"noise_profile has {prof.shape[0]} entries for {n_layers} layers"
                )
            return prof
        # Late-heavy default: early layers stay nearly clean so the planted
        # signal survives to the depths the default mask optimizes; tuned for
        # the 6-layer desk model, generalized as a quartic ramp otherwise.
        if n_layers == 6:
            return np.array([0.0, 0.01, 0.05, 0.4, 1.2, 2.0])
        ramp = np.linspace(0.0, 1.0, n_layers) ** 4
        return 2.0 * ramp


@dataclass(frozen=True)
class PlantRecord:
    """What was planted: centers, per-cluster patterns, and noise layout."""

    seed: int
    spec: PlantSpec
    centers: np.ndarray            # (n_clusters, d)
    pattern_logits: np.ndarray     # (n_clusters, L, E)
    planted_pathways: np.ndarray   # (n_clusters, T, L, E)
    noise_profile: np.ndarray      # (L,)

    def cluster_of(self, x: np.ndarray) -> int:
        pooled = np.asarray(x, dtype=np.float64).mean(axis=0)
        return int(np.argmax(self.centers @ pooled))


@dataclass
class MoEModel:
    """Immutable container of model parameters plus the forward/gradient ops."""

    config: RoutingConfig
    routers: np.ndarray  # (L, E, d)
    w1: np.ndarray       # (L, E, h, d)
    w2: np.ndarray       # (L, E, d, h)
    w_out: np.ndarray    # (C, d)
    plant: PlantRecord | None = None

    def __post_init__(self) -> None:
        l, e, d = self.routers.shape
        if (l, e) != (self.config.n_layers, self.config.n_experts):
            raise PathwayError("router shape inconsistent with config")
        h = self.w1.shape[2]
        if self.w1.shape != (l, e, h, d) or self.w2.shape != (l, e, d, h):
            raise PathwayError("expert parameter shapes inconsistent")
        if self.w_out.shape[1] != d:
            raise PathwayError("readout width inconsistent with model dim")
        for name in ("routers", "w1", "w2", "w_out"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"non-finite values in {name}")

    @property
    def d_model(self) -> int:
        return self.routers.shape[2]

    @property
    def hidden_width(self) -> int:
        return self.w1.shape[2]

    @property
    def n_classes(self) -> int:
        return self.w_out.shape[0]

    @classmethod
    def random(
        cls,
        seed: int,
        config: RoutingConfig | None = None,
        d_model: int = 16,
        hidden_width: int = 8,
        n_classes: int = 4,
    ) -> "MoEModel":
        """Unstructured random parameters at tame scales (used by tests)."""
        config = config or RoutingConfig()
        rng = np.random.default_rng(seed)
        l, e = config.n_layers, config.n_experts
        return cls(
            config=config,
            routers=rng.normal(0.0, 0.6 / math.sqrt(d_model), (l, e, d_model)),
            w1=rng.normal(0.0, 0.5, (l, e, hidden_width, d_model)),
            w2=rng.normal(0.0, 0.3 / math.sqrt(hidden_width), (l, e, d_model, hidden_width)),
            w_out=rng.normal(0.0, 1.0 / math.sqrt(d_model), (n_classes, d_model)),
        )

    def fingerprint(self) -> str:
        digest = sha256_hex(
            b"".join(
                np.ascontiguousarray(a, dtype=np.float64).tobytes()
                for a in (self.routers, self.w1, self.w2, self.w_out)
            )
        )
        return digest[:16]

    # ------------------------------------------------------------------
    # forward family

    def _validate_input(self, x: np.ndarray) -> np.ndarray:
        arr = np.asarray(x, dtype=np.float64)
        if arr.shape != (self.config.n_tokens, self.d_model):
            raise PathwayError(
                f"input shape {arr.shape} != {(self.config.n_tokens, self.d_model)}"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite input")
        return arr

    def _token_layers(
        self,
        h: np.ndarray,
        omega_rows: np.ndarray | None,
        masked_layers: np.ndarray,
        collect: bool = False,
    ):
        """Run one token through all layers.

        Returns (final hidden state, dense router rows actually *computed*,
        rows actually *used*, per-layer sparse picks, optional gradient cache).
        """
        cfg = self.config
        used_rows = np.empty((cfg.n_layers, cfg.n_experts))
        picks: list[tuple[np.ndarray, np.ndarray]] = []
        cache = [] if collect else None
        for l in range(cfg.n_layers):
            if masked_layers[l]:
                row = omega_rows[l]
            else:
                row = _softmax(self.routers[l] @ h)
            used_rows[l] = row
            idx, w = sparsify_topk(row, cfg.top_k)
            hidden = np.tanh(self.w1[l, idx] @ h)                # (k, hw)
            outs = np.einsum("edh,eh->ed", self.w2[l, idx], hidden)  # (k, d)
            if collect:
                cache.append(
                    {
                        "h": h,
                        "row": row,
                        "masked": bool(masked_layers[l]),
                        "idx": idx,
                        "kept": row[idx],
                        "w": w,
                        "hidden": hidden,
                        "outs": outs,
                    }
                )
            h = h + w @ outs
            picks.append((idx, w))
        return h, used_rows, picks, cache

    def route(self, x: np.ndarray) -> np.ndarray:
        """Dense router pathway (T, L, E): softmax scores along the base forward."""
        return self.forward_base(x)[1]

    def forward_base(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Forward under the router's own pathway; returns (logits, pathway)."""
        arr = self._validate_input(x)
        cfg = self.config
        pathway = np.empty(cfg.pathway_shape)
        no_mask = np.zeros(cfg.n_layers, dtype=bool)
        h_last = None
        for t in range(cfg.n_tokens):
            h, rows, _, _ = self._token_layers(arr[t], None, no_mask)
            pathway[t] = rows
            h_last = h
        logits = self.w_out @ h_last
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits")
        return logits, pathway

    def forward_with_pathway(
        self, x: np.ndarray, omega: np.ndarray, mask: OptimizationMask
    ) -> tuple[np.ndarray, SparseRouting]:
        """Forward with ``omega`` overriding routing on masked (token, layer) rows.

        Returns the class logits and the sparsified routing actually used at
        every (token, layer).
        """
        arr = self._validate_input(x)
        cfg = self.config
        w = validate_pathway(omega, cfg)
        mask.validate_bounds(cfg)
        indices = np.empty((cfg.n_tokens, cfg.n_layers, cfg.top_k), dtype=np.int64)
        weights = np.empty((cfg.n_tokens, cfg.n_layers, cfg.top_k))
        h_last = None
        for t in range(cfg.n_tokens):
            masked_layers = np.zeros(cfg.n_layers, dtype=bool)
            if t in mask.tokens:
                masked_layers[list(mask.layers)] = True
            h, _, picks, _ = self._token_layers(arr[t], w[t], masked_layers)
            for l, (idx, wts) in enumerate(picks):
                indices[t, l] = idx
                weights[t, l] = wts
            h_last = h
        logits = self.w_out @ h_last
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits")
        return logits, SparseRouting(indices=indices, weights=weights)

    def _last_token_logits(
        self, x: np.ndarray, omega: np.ndarray | None, mask: OptimizationMask | None
    ) -> np.ndarray:
        """Logits only.  Skips tokens that cannot reach the readout; the op
        sequence on the last token matches the full forward bit for bit."""
        arr = self._validate_input(x)
        cfg = self.config
        t = cfg.n_tokens - 1
        masked_layers = np.zeros(cfg.n_layers, dtype=bool)
        rows = None
        if omega is not None and mask is not None and t in mask.tokens:
            masked_layers[list(mask.layers)] = True
            rows = omega[t]
        h, _, _, _ = self._token_layers(arr[t], rows, masked_layers)
        return self.w_out @ h

    def _batch_token_layers(
        self,
        hs: np.ndarray,
        omega_rows: np.ndarray | None,
        masked_layers: np.ndarray,
        collect: bool = False,
    ):
        """Batched ``_token_layers`` over B last-token states.

        ``hs`` is (B, d).  ``omega_rows`` is either (L, E) — one override
        shared by the whole batch — or (B, L, E) with one override per batch
        element.  Returns (final states (B, d), optional cache).
        """
        cfg = self.config
        n = hs.shape[0]
        k = cfg.top_k
        cache = [] if collect else None
        for l in range(cfg.n_layers):
            if masked_layers[l]:
                if omega_rows.ndim == 2:
                    rows = np.broadcast_to(omega_rows[l], (n, cfg.n_experts))
                else:
                    rows = omega_rows[:, l, :]
            else:
                z = hs @ self.routers[l].T  # (B, E)
                z = z - z.max(axis=1, keepdims=True)
                e = np.exp(z)
                rows = e / e.sum(axis=1, keepdims=True)
            order = np.argsort(-rows, axis=1, kind="stable")[:, :k]  # (B, k)
            kept = np.take_along_axis(rows, order, axis=1)  # (B, k)
            clamped = np.maximum(kept, 0.0)
            totals = clamped.sum(axis=1, keepdims=True)
            wts = np.where(
                totals > 0.0, clamped / np.where(totals > 0.0, totals, 1.0), 1.0 / k
            )
            hidden = np.tanh(
                np.einsum("bkhd,bd->bkh", self.w1[l, order], hs)
            )  # (B, k, hw)
            outs = np.einsum("bkdh,bkh->bkd", self.w2[l, order], hidden)  # (B, k, d)
            if collect:
                cache.append(
                    {
                        "rows": rows,
                        "masked": bool(masked_layers[l]),
                        "idx": order,
                        "kept": kept,
                        "w": wts,
                        "hidden": hidden,
                        "outs": outs,
                    }
                )
            hs = hs + np.einsum("bk,bkd->bd", wts, outs)
        return hs, cache

    def _batch_last_token_logits(
        self, xs: np.ndarray, omega: np.ndarray | None, mask: OptimizationMask | None
    ) -> np.ndarray:
        """Last-token logits for a stack of inputs (B, T, d).

        ``omega`` may be (T, L, E) — one override for the whole batch — or
        (B, T, L, E) with one override per input.
        """
        cfg = self.config
        t = cfg.n_tokens - 1
        masked_layers = np.zeros(cfg.n_layers, dtype=bool)
        rows = None
        if omega is not None and mask is not None and t in mask.tokens:
            masked_layers[list(mask.layers)] = True
            rows = omega[t] if omega.ndim == 3 else omega[:, t]
        hs, _ = self._batch_token_layers(xs[:, t, :], rows, masked_layers)
        return hs @ self.w_out.T  # (B, C)

    # ------------------------------------------------------------------
    # gradients

    def grad_pathway(
        self, x: np.ndarray, label: int, omega: np.ndarray, mask: OptimizationMask
    ) -> np.ndarray:
        """Exact reverse-mode d loss / d omega on masked entries.

        The top-k support stays fixed at its forward-pass selection; the
        derivative runs through the kept-weight renormalization and is zero
        outside the forward support (and outside the mask).
        """
        return self.loss_and_grad(x, label, omega, mask)[1]

    def loss_and_grad(
        self, x: np.ndarray, label: int, omega: np.ndarray, mask: OptimizationMask
    ) -> tuple[float, np.ndarray]:
        """Cross-entropy and its pathway gradient from one shared forward pass."""
        arr = self._validate_input(x)
        cfg = self.config
        w = validate_pathway(omega, cfg)
        mask.validate_bounds(cfg)
        grad = np.zeros(cfg.pathway_shape)

        t = cfg.n_tokens - 1  # earlier tokens cannot reach the readout
        masked_layers = np.zeros(cfg.n_layers, dtype=bool)
        if t in mask.tokens:
            masked_layers[list(mask.layers)] = True
        h, _, _, cache = self._token_layers(arr[t], w[t], masked_layers, collect=True)

        logits = self.w_out @ h
        p = _softmax(logits)
        if not 0 <= int(label) < p.shape[0]:
            raise ValueError(f"label {label} out of range")
        g_logits = p.copy()
        g_logits[int(label)] -= 1.0
        g_h = self.w_out.T @ g_logits

        for l in range(cfg.n_layers - 1, -1, -1):
            rec = cache[l]
            idx, kept, wts = rec["idx"], rec["kept"], rec["w"]
            # d loss / d mixture weights
            gw = rec["outs"] @ g_h  # (k,)
            # expert path back to the hidden state
            g_a = (self.w2[l, idx].transpose(0, 2, 1) @ g_h) * wts[:, None]  # (k, hw)
            g_u = g_a * (1.0 - rec["hidden"] ** 2)
            g_h_new = g_h + np.einsum("ehd,eh->d", self.w1[l, idx], g_u)
            # through the clamp + renormalization of sparsify_topk
            clamped = np.maximum(kept, 0.0)
            total = clamped.sum()
            if total > 0.0:
                gv = np.where(kept > 0.0, (gw - gw @ wts) / total, 0.0)
            else:
                gv = np.zeros_like(gw)  # uniform fallback: constant in omega
            if rec["masked"]:
                grad[t, l, idx] = gv
            else:
                gv_full = np.zeros(cfg.n_experts)
                gv_full[idx] = gv
                row = rec["row"]
                g_z = row * (gv_full - row @ gv_full)
                g_h_new = g_h_new + self.routers[l].T @ g_z
            g_h = g_h_new

        grad[~mask.bool_array(cfg)] = 0.0
        return cross_entropy(logits, int(label)), grad

    def _batch_loss_and_grad(
        self,
        xs: np.ndarray,
        labels: np.ndarray,
        coefs: np.ndarray,
        omega: np.ndarray,
        mask: OptimizationMask,
    ) -> tuple[float, np.ndarray]:
        """Weighted surrogate ``sum_b coefs[b] * CE(f(xs[b]; omega), labels[b])``
        and its pathway gradient, batched over samples sharing one override.

        Internal hot path: inputs are trusted (already validated upstream).
        """
        cfg = self.config
        t = cfg.n_tokens - 1
        masked_layers = np.zeros(cfg.n_layers, dtype=bool)
        if t in mask.tokens:
            masked_layers[list(mask.layers)] = True
        hs, cache = self._batch_token_layers(
            xs[:, t, :], omega[t], masked_layers, collect=True
        )

        logits = hs @ self.w_out.T  # (B, C)
        m = logits.max(axis=1)
        shifted = logits - m[:, None]
        exp = np.exp(shifted)
        sums = exp.sum(axis=1)
        losses = np.log(sums) + m - logits[np.arange(len(labels)), labels]
        loss = float(coefs @ losses)

        probs = exp / sums[:, None]
        g_logits = probs * coefs[:, None]
        g_logits[np.arange(len(labels)), labels] -= coefs
        g_hs = g_logits @ self.w_out  # (B, d)

        grad = np.zeros(cfg.pathway_shape)
        for l in range(cfg.n_layers - 1, -1, -1):
            rec = cache[l]
            idx, kept, wts = rec["idx"], rec["kept"], rec["w"]
            gw = np.einsum("bkd,bd->bk", rec["outs"], g_hs)
            g_a = np.einsum("bkdh,bd->bkh", self.w2[l, idx], g_hs) * wts[:, :, None]
            g_u = g_a * (1.0 - rec["hidden"] ** 2)
            g_hs_new = g_hs + np.einsum("bkhd,bkh->bd", self.w1[l, idx], g_u)
            clamped = np.maximum(kept, 0.0)
            totals = clamped.sum(axis=1, keepdims=True)
            safe = np.where(totals > 0.0, totals, 1.0)
            gwdot = np.einsum("bk,bk->b", gw, wts)[:, None]
            gv = np.where((kept > 0.0) & (totals > 0.0), (gw - gwdot) / safe, 0.0)
            if rec["masked"]:
                # the override row is shared, so every batch element picks the
                # same support; contributions just sum across the batch
                grad[t, l, idx[0]] = gv.sum(axis=0)
            else:
                gv_full = np.zeros((len(labels), cfg.n_experts))
                np.put_along_axis(gv_full, idx, gv, axis=1)
                rows = rec["rows"]
                g_z = rows * (gv_full - np.einsum("be,be->b", rows, gv_full)[:, None])
                g_hs_new = g_hs_new + g_z @ self.routers[l]
            g_hs = g_hs_new

        grad[~mask.bool_array(cfg)] = 0.0
        return loss, grad

    def finite_diff_grad(
        self,
        x: np.ndarray,
        label: int,
        omega: np.ndarray,
        mask: OptimizationMask,
        step: float = 1e-5,
    ) -> np.ndarray:
        """Central-difference gradient over masked entries (test oracle)."""
        if not step > 0:
            raise ValueError("step must be positive")
        cfg = self.config
        base = validate_pathway(omega, cfg).copy()
        sel = mask.bool_array(cfg)
        grad = np.zeros(cfg.pathway_shape)
        for t, l, e in zip(*np.nonzero(sel)):
            safe = base[t, l, e]
            base[t, l, e] = safe + step
            up = cross_entropy(self.forward_with_pathway(x, base, mask)[0], label)
            base[t, l, e] = safe - step
            down = cross_entropy(self.forward_with_pathway(x, base, mask)[0], label)
            base[t, l, e] = safe
            grad[t, l, e] = (up - down) / (2.0 * step)
        return grad


# ---------------------------------------------------------------------------
# planted benchmark


def generate_planted_benchmark(
    seed: int, spec: PlantSpec, config: RoutingConfig
) -> tuple[MoEModel, list[tuple[np.ndarray, int]], list[tuple[np.ndarray, int]]]:
    """Build (model, pool, test) with a known-good pathway per input cluster.

    Labels are defined as the model's own prediction under the cluster's
    planted pathway, so that pathway is correct on every sample by
    construction.  Router weights are fit to reproduce the planted pattern on
    the cluster anchors exactly, then perturbed so routing logits pick up
    per-sample noise of scale ``spec.router_noise`` (shaped per layer by the
    noise profile).  Fully deterministic in ``seed``.
    """
    d, hw, c_classes = spec.d_model, spec.hidden_width, spec.n_classes
    n_clusters = spec.n_clusters
    L, E, T, top_k = config.n_layers, config.n_experts, config.n_tokens, config.top_k
    if n_clusters >= d:
        raise ValueError(
            f"n_clusters={n_clusters} must be < d_model={d} (centers need an "
            "orthogonal jitter subspace)"
        )
    rng = np.random.default_rng(seed)

    # orthogonal frame: first n_clusters columns carry cluster identity,
    # the rest span the within-cluster jitter
    q_raw, r_raw = np.linalg.qr(rng.normal(0.0, 1.0, (d, d)))
    q = q_raw * np.sign(np.diag(r_raw))
    centers = spec.center_scale * q[:, :n_clusters].T  # (n_clusters, d)
    jitter_basis = q[:, n_clusters:]                   # (d, d - n_clusters)

    # experts; their input weights are confined to the cluster subspace so
    # that within-cluster jitter rides the residual stream untouched — at
    # zero router noise every sample follows its anchor trajectory exactly
    # (plus its own jitter), which keeps the planted labels noise-free
    visible = q[:, :n_clusters] @ q[:, :n_clusters].T  # projector onto centers
    sigma1 = spec.sat_gain / spec.center_scale * math.sqrt(d / n_clusters)
    w1 = rng.normal(0.0, sigma1, (L, E, hw, d)) @ visible
    w2 = rng.normal(0.0, spec.expert_gain / math.sqrt(hw * d), (L, E, d, hw))

    # planted expert patterns
    pattern_logits = np.zeros((n_clusters, L, E))
    for ci in range(n_clusters):
        for l in range(L):
            chosen = rng.choice(E, size=top_k, replace=False)
            pattern_logits[ci, l, chosen] = spec.plant_gap
    planted_rows = np.empty((n_clusters, L, E))
    for ci in range(n_clusters):
        for l in range(L):
            planted_rows[ci, l] = _softmax(pattern_logits[ci, l])
    planted_pathways = np.repeat(planted_rows[:, None, :, :], T, axis=1)  # (C, T, L, E)

    # anchor trajectories under the planted rows, starting at the centers
    def planted_trajectory(h0: np.ndarray, ci: int) -> np.ndarray:
        states = np.empty((L + 1, d))
        h = h0
        for l in range(L):
            states[l] = h
            idx, w = sparsify_topk(planted_rows[ci, l], top_k)
            hidden = np.tanh(w1[l, idx] @ h)
            outs = np.einsum("edh,eh->ed", w2[l, idx], hidden)
            h = h + w @ outs
        states[L] = h
        return states

    anchors = np.stack([planted_trajectory(centers[ci], ci) for ci in range(n_clusters)])

    # readout fit so each cluster's anchor scores logit_scale on its intended
    # class and 0 elsewhere — anchor decision margins are exactly logit_scale,
    # making the benchmark's difficulty a direct function of that knob
    targets = np.zeros((c_classes, n_clusters))
    for ci in range(n_clusters):
        targets[ci % c_classes, ci] = spec.logit_scale
    w_out = targets @ np.linalg.pinv(anchors[:, L, :].T)

    # routers: exact least-squares fit of pattern logits on the anchors, plus
    # a noise map confined to the anchor-orthogonal subspace so corruption is
    # per-sample rather than per-cluster
    routers = np.empty((L, E, d))
    noise_maps = np.empty((L, E, d))
    profile = spec.resolved_profile(L)
    for l in range(L):
        h_mat = anchors[:, l, :].T                     # (d, n_clusters)
        z_mat = pattern_logits[:, l, :].T              # (E, n_clusters)
        fit = z_mat @ np.linalg.pinv(h_mat)
        u, s, _ = np.linalg.svd(h_mat, full_matrices=False)
        basis = u[:, s > s[0] * 1e-12] if s.size else u[:, :0]
        g_raw = rng.normal(0.0, 1.0, (E, d))
        noise_maps[l] = g_raw - (g_raw @ basis) @ basis.T
        routers[l] = fit  # noise scale attached after calibration below

    def draw_input(ci: int) -> np.ndarray:
        shared = jitter_basis @ rng.normal(0.0, spec.jitter_scale, d - n_clusters)
        per_token = rng.normal(0.0, spec.token_jitter, (T, d - n_clusters))
        return centers[ci] + shared + per_token @ jitter_basis.T

    # calibrate noise maps so one unit of router_noise is one unit of logit
    # noise under typical within-cluster hidden-state deviations
    n_cal = 96
    dev_noise = np.zeros((L, n_cal, E))
    for i in range(n_cal):
        ci = i % n_clusters
        x = draw_input(ci)
        states = planted_trajectory(x[T - 1], ci)
        for l in range(L):
            dev_noise[l, i] = noise_maps[l] @ (states[l] - anchors[ci, l])
    for l in range(L):
        scale = float(dev_noise[l].std())
        noise_maps[l] /= max(scale, 1e-9)
        routers[l] = routers[l] + spec.router_noise * profile[l] * noise_maps[l]

    plant = PlantRecord(
        seed=seed,
        spec=spec,
        centers=centers,
        pattern_logits=pattern_logits,
        planted_pathways=planted_pathways,
        noise_profile=profile,
    )
    model = MoEModel(
        config=config, routers=routers, w1=w1, w2=w2, w_out=w_out, plant=plant
    )

    # labels: the model's own verdict under the planted pathway; samples with
    # a thin decision margin are redrawn so labels stay robust
    def labeled_sample(ci: int) -> tuple[np.ndarray, int]:
        for _ in range(200):
            x = draw_input(ci)
            h = planted_trajectory(x[T - 1], ci)[L]
            logits = w_out @ h
            order = np.argsort(logits)
            margin = logits[order[-1]] - logits[order[-2]]
            if margin >= spec.label_margin:
                return x, int(order[-1])
        raise NumericError(
            f"could not draw a sample with margin >= {spec.label_margin} "
            f"for cluster {ci}; lower label_margin or logit_scale"
        )

    pool = [labeled_sample(i % n_clusters) for i in range(spec.pool_size)]
    test = [labeled_sample(i % n_clusters) for i in range(spec.test_size)]
    return model, pool, test


# ---------------------------------------------------------------------------
# persistence


def save_model(model: MoEModel, path: str | Path) -> None:
    doc: dict[str, Any] = {
        "schema": MODEL_SCHEMA,
        "kind": "moe-model",
        "config": {
            "n_tokens": model.config.n_tokens,
            "n_layers": model.config.n_layers,
            "n_experts": model.config.n_experts,
            "top_k": model.config.top_k,
        },
        "arrays": {
            "routers": array_to_block(model.routers),
            "w1": array_to_block(model.w1),
            "w2": array_to_block(model.w2),
            "w_out": array_to_block(model.w_out),
        },
    }
    if model.plant is not None:
        p = model.plant
        spec_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(p.spec).items()}
        doc["plant"] = {
            "seed": p.seed,
            "spec": spec_dict,
            "centers": array_to_block(p.centers),
            "pattern_logits": array_to_block(p.pattern_logits),
            "planted_pathways": array_to_block(p.planted_pathways),
            "noise_profile": array_to_block(p.noise_profile),
        }
    Path(path).write_text(canonical_json(doc) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> MoEModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SerializationError(f"invalid model JSON: {exc.msg}") from exc
    if doc.get("kind") != "moe-model" or doc.get("schema") != MODEL_SCHEMA:
        raise SerializationError(f"not a schema-{MODEL_SCHEMA} model file")
    config = RoutingConfig(**doc["config"])
    arrays = doc["arrays"]
    plant = None
    if "plant" in doc:
        p = doc["plant"]
        spec_kwargs = dict(p["spec"])
        if spec_kwargs.get("noise_profile") is not None:
            spec_kwargs["noise_profile"] = tuple(spec_kwargs["noise_profile"])
        plant = PlantRecord(
            seed=int(p["seed"]),
            spec=PlantSpec(**spec_kwargs),
            centers=block_to_array(p["centers"]),
            pattern_logits=block_to_array(p["pattern_logits"]),
            planted_pathways=block_to_array(p["planted_pathways"]),
            noise_profile=block_to_array(p["noise_profile"]),
        )
    return MoEModel(
        config=config,
        routers=block_to_array(arrays["routers"]),
        w1=block_to_array(arrays["w1"]),
        w2=block_to_array(arrays["w2"]),
        w_out=block_to_array(arrays["w_out"]),
        plant=plant,
    )
