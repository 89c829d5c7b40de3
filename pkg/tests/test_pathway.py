"""Pathway containers, top-k sparsification, and masked arithmetic."""

import numpy as np
import pytest

from pathopt import (
    OptimizationMask,
    PathwayError,
    RoutingConfig,
    SparseRouting,
    apply_masked_update,
    masked_distance,
    sparsify_pathway,
    sparsify_topk,
    validate_pathway,
)


def small_mask():
    return OptimizationMask(tokens=(3,), layers=(3, 4, 5))


class TestRoutingConfig:
    def test_defaults(self):
        cfg = RoutingConfig()
        assert (cfg.n_tokens, cfg.n_layers, cfg.n_experts, cfg.top_k) == (4, 6, 16, 4)
        assert cfg.pathway_shape == (4, 6, 16)

    def test_top_k_bounded_by_experts(self):
        with pytest.raises(PathwayError):
            RoutingConfig(n_experts=4, top_k=5)

    def test_positive_dims(self):
        with pytest.raises(PathwayError):
            RoutingConfig(n_tokens=0)
        with pytest.raises(PathwayError):
            RoutingConfig(top_k=0)


class TestValidatePathway:
    def test_returns_float64(self, cfg):
        arr = validate_pathway(np.zeros(cfg.pathway_shape, dtype=np.float32), cfg)
        assert arr.dtype == np.float64

    def test_rejects_wrong_shape(self, cfg):
        with pytest.raises(PathwayError):
            validate_pathway(np.zeros((4, 6, 15)), cfg)

    def test_rejects_non_finite(self, cfg):
        bad = np.zeros(cfg.pathway_shape)
        bad[0, 0, 0] = np.nan
        with pytest.raises(PathwayError):
            validate_pathway(bad, cfg)
        bad[0, 0, 0] = np.inf
        with pytest.raises(PathwayError):
            validate_pathway(bad, cfg)

    def test_negative_entries_allowed(self, cfg):
        # transient iterates may dip below zero; sparsification clamps later
        arr = np.full(cfg.pathway_shape, -0.25)
        assert validate_pathway(arr, cfg).min() == -0.25


class TestSparsifyTopk:
    def test_known_renormalization(self):
        idx, w = sparsify_topk(np.array([0.7, 0.15, 0.1, 0.05]), 2)
        assert idx.tolist() == [0, 1]
        assert w[0] == 0.8235294117647058
        assert w[1] == 0.17647058823529413

    def test_ties_break_to_lower_index(self):
        idx, _ = sparsify_topk(np.array([0.25, 0.25, 0.25, 0.25]), 2)
        assert idx.tolist() == [0, 1]
        idx, _ = sparsify_topk(np.array([0.1, 0.4, 0.1, 0.4]), 2)
        assert idx.tolist() == [1, 3]

    def test_negative_survivors_are_clamped(self):
        idx, w = sparsify_topk(np.array([0.9, -0.5, -0.6, 0.05]), 3)
        assert idx.tolist() == [0, 3, 1]
        assert w.tolist() == [0.9473684210526315, 0.05263157894736842, 0.0]

    def test_negatives_dropped_from_total(self):
        idx, w = sparsify_topk(np.array([0.6, -0.2, 0.5, 0.1]), 3)
        assert idx.tolist() == [0, 2, 3]
        assert w.tolist() == [0.4999999999999999, 0.41666666666666663, 0.08333333333333333]

    def test_all_nonpositive_goes_uniform(self):
        _, w = sparsify_topk(np.array([-1.0, -2.0, 0.0, -3.0]), 4)
        assert w.tolist() == [0.25, 0.25, 0.25, 0.25]
        _, w = sparsify_topk(np.zeros(5), 2)
        assert w.tolist() == [0.5, 0.5]

    def test_weights_sum_to_one(self, rng):
        for _ in range(200):
            row = rng.normal(size=16)
            k = int(rng.integers(1, 17))
            idx, w = sparsify_topk(row, k)
            assert len(idx) == len(w) == k
            assert len(set(idx.tolist())) == k
            assert abs(w.sum() - 1.0) < 1e-12
            assert np.all(w >= 0.0)

    def test_selection_matches_value_order(self, rng):
        for _ in range(100):
            row = rng.normal(size=12)
            idx, _ = sparsify_topk(row, 5)
            chosen = sorted(row[idx].tolist(), reverse=True)
            best = sorted(row.tolist(), reverse=True)[:5]
            assert chosen == best

    def test_validation(self):
        with pytest.raises(PathwayError):
            sparsify_topk(np.zeros((2, 2)), 1)
        with pytest.raises(PathwayError):
            sparsify_topk(np.zeros(4), 5)
        with pytest.raises(PathwayError):
            sparsify_topk(np.zeros(4), 0)
        with pytest.raises(PathwayError):
            sparsify_topk(np.array([0.5, np.nan]), 1)


class TestSparsifyPathway:
    def test_shapes_and_row_consistency(self, cfg, rng):
        pw = rng.random(cfg.pathway_shape)
        routing = sparsify_pathway(pw, cfg)
        assert routing.indices.shape == (4, 6, 4)
        assert routing.weights.shape == (4, 6, 4)
        idx, w = sparsify_topk(pw[2, 3], cfg.top_k)
        assert routing.indices[2, 3].tolist() == idx.tolist()
        assert routing.weights[2, 3].tolist() == w.tolist()

    def test_to_dense_round_trip(self, cfg, rng):
        pw = rng.random(cfg.pathway_shape)
        routing = sparsify_pathway(pw, cfg)
        dense = routing.to_dense(cfg.n_experts)
        assert dense.shape == cfg.pathway_shape
        # every row of the dense form sums to 1 and has exactly k nonzeros
        # (generic random rows have no ties or zero survivors)
        nz = (dense > 0).sum(axis=2)
        assert np.all(nz == cfg.top_k)
        assert np.allclose(dense.sum(axis=2), 1.0)


class TestOptimizationMask:
    def test_bool_array_counts(self, cfg):
        mask = small_mask()
        sel = mask.bool_array(cfg)
        assert sel.sum() == 1 * 3 * cfg.n_experts
        assert sel[3, 4].all() and not sel[2].any() and not sel[3, 2].any()

    def test_core_experts_restrict_rows(self, cfg):
        mask = OptimizationMask(
            tokens=(3,),
            layers=(4, 5),
            core_experts={4: (0, 1), 5: (7, 9)},
        )
        sel = mask.bool_array(cfg)
        assert sel.sum() == 4
        assert sel[3, 4, 0] and sel[3, 4, 1] and sel[3, 5, 7] and sel[3, 5, 9]

    def test_core_keys_must_match_layers(self):
        with pytest.raises(PathwayError):
            OptimizationMask(tokens=(0,), layers=(1, 2), core_experts={1: (0,)})

    def test_core_sets_same_size(self):
        with pytest.raises(PathwayError):
            OptimizationMask(
                tokens=(0,), layers=(1, 2), core_experts={1: (0,), 2: (0, 1)}
            )

    def test_sorted_unique(self):
        with pytest.raises(PathwayError):
            OptimizationMask(tokens=(1, 0), layers=(0,))
        with pytest.raises(PathwayError):
            OptimizationMask(tokens=(0, 0), layers=(0,))
        with pytest.raises(PathwayError):
            OptimizationMask(tokens=(), layers=(0,))

    def test_bounds_check(self, cfg):
        with pytest.raises(PathwayError):
            OptimizationMask(tokens=(4,), layers=(0,)).bool_array(cfg)
        with pytest.raises(PathwayError):
            OptimizationMask(tokens=(0,), layers=(6,)).bool_array(cfg)
        with pytest.raises(PathwayError):
            OptimizationMask(
                tokens=(0,), layers=(0,), core_experts={0: (16,)}
            ).validate_bounds(cfg)

    def test_full_mask(self, cfg):
        assert OptimizationMask.full(cfg).bool_array(cfg).all()

    def test_covers_row(self):
        mask = small_mask()
        assert mask.covers_row(3, 4)
        assert not mask.covers_row(2, 4)
        assert not mask.covers_row(3, 0)


class TestApplyMaskedUpdate:
    def test_outside_mask_bit_identical(self, cfg, rng):
        mask = small_mask()
        sel = mask.bool_array(cfg)
        for _ in range(50):
            base = rng.random(cfg.pathway_shape)
            delta = rng.normal(size=cfg.pathway_shape)
            out = apply_masked_update(base, delta, mask, cfg)
            assert np.array_equal(out[~sel], base[~sel])
            assert np.array_equal(out[sel], base[sel] + delta[sel])

    def test_input_not_mutated(self, cfg, rng):
        mask = small_mask()
        base = rng.random(cfg.pathway_shape)
        snapshot = base.copy()
        apply_masked_update(base, np.ones(cfg.pathway_shape), mask, cfg)
        assert np.array_equal(base, snapshot)

    def test_shape_mismatch(self, cfg):
        with pytest.raises(PathwayError):
            apply_masked_update(
                np.zeros(cfg.pathway_shape), np.zeros((4, 6, 15)), small_mask(), cfg
            )


class TestMaskedDistance:
    def test_three_four_five(self, cfg):
        mask = small_mask()
        a = np.zeros(cfg.pathway_shape)
        b = np.zeros(cfg.pathway_shape)
        b[3, 3, 0] = 3.0
        b[3, 4, 1] = 4.0
        assert masked_distance(a, b, mask, cfg) == 5.0

    def test_ignores_outside_mask(self, cfg, rng):
        mask = small_mask()
        a = rng.random(cfg.pathway_shape)
        b = a.copy()
        b[0] += 100.0  # token 0 is unmasked
        b[3, 0] += 100.0  # layer 0 is unmasked
        assert masked_distance(a, b, mask, cfg) == 0.0

    def test_symmetry(self, cfg, rng):
        mask = small_mask()
        a, b = rng.random(cfg.pathway_shape), rng.random(cfg.pathway_shape)
        assert masked_distance(a, b, mask, cfg) == masked_distance(b, a, mask, cfg)


class TestSparseRouting:
    def test_dense_placement(self):
        routing = SparseRouting(
            indices=np.array([[[2, 0]]], dtype=np.int64),
            weights=np.array([[[0.75, 0.25]]]),
        )
        dense = routing.to_dense(4)
        assert dense.shape == (1, 1, 4)
        assert dense[0, 0].tolist() == [0.25, 0.0, 0.75, 0.0]
