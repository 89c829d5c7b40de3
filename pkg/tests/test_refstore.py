"""Reference-set construction, persistence, and integrity checks."""

import numpy as np
import pytest

from pathopt import (
    DegenerateEmbeddingError,
    EmptyStoreError,
    MeanPoolEmbedder,
    ReferenceEntry,
    ReferenceStore,
    SerializationError,
    StoreError,
    build_reference_set,
    load_store,
    save_store,
    store_hash,
    verify_store,
)


class TestMeanPoolEmbedder:
    def test_known_value(self):
        emb = MeanPoolEmbedder().embed(np.array([[3.0, 4.0], [3.0, 4.0]]))
        assert emb.tolist() == [0.6, 0.8]

    def test_unit_norm(self, rng):
        for _ in range(20):
            emb = MeanPoolEmbedder().embed(rng.normal(size=(4, 16)))
            assert abs(np.linalg.norm(emb) - 1.0) < 1e-12

    def test_degenerate_input(self):
        with pytest.raises(DegenerateEmbeddingError):
            MeanPoolEmbedder().embed(np.zeros((4, 16)))
        # opposite tokens cancel in the mean
        x = np.vstack([np.ones((1, 8)), -np.ones((1, 8))])
        with pytest.raises(DegenerateEmbeddingError):
            MeanPoolEmbedder().embed(x)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            MeanPoolEmbedder().embed(np.zeros(16))
        bad = np.ones((4, 4))
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            MeanPoolEmbedder().embed(bad)


class TestBuildReferenceSet:
    def test_keeps_only_correct_samples(self, small_bench, small_store):
        model, pool, _ = small_bench
        keep = [
            i
            for i, (x, y) in enumerate(pool)
            if int(np.argmax(model.forward_base(x)[0])) == y
        ]
        assert len(small_store) == len(keep)
        assert 0 < len(small_store) < len(pool)  # the router must be imperfect
        for e, i in zip(small_store, keep):
            assert e.meta["pool_index"] == str(i)
            assert np.array_equal(e.input, np.asarray(pool[i][0]))

    def test_ids_are_dense_and_increasing(self, small_store):
        assert small_store.ids.tolist() == list(range(len(small_store)))

    def test_pathways_match_base_routing(self, small_bench, small_store):
        model = small_bench[0]
        for e in list(small_store)[:10]:
            assert np.array_equal(e.pathway, model.route(e.input))

    def test_embeddings_are_unit(self, small_store):
        norms = np.linalg.norm(small_store.embeddings, axis=1)
        assert np.max(np.abs(norms - 1.0)) < 1e-12

    def test_provenance_records_model(self, small_bench, small_store):
        assert small_store.provenance["model_hash"] == small_bench[0].fingerprint()
        assert small_store.provenance["pool_size"] == len(small_bench[1])
        assert small_store.provenance["seed"] == small_bench[0].plant.seed

    def test_empty_pool_rejected(self, small_bench):
        with pytest.raises(EmptyStoreError):
            build_reference_set(small_bench[0], [])

    def test_all_wrong_pool_rejected(self, small_bench):
        model, pool, _ = small_bench
        sabotaged = [
            (x, (int(np.argmax(model.forward_base(x)[0])) + 1) % 4)
            for x, _ in pool[:20]
        ]
        with pytest.raises(EmptyStoreError):
            build_reference_set(model, sabotaged)


class TestReferenceStore:
    def test_entry_lookup(self, small_store):
        e = small_store.entry(5)
        assert e.id == 5

    def test_stacked_views(self, small_store, cfg):
        n = len(small_store)
        assert small_store.embeddings.shape == (n, 16)
        assert small_store.pathways.shape == (n,) + cfg.pathway_shape
        assert small_store.labels().shape == (n,)

    def test_requires_increasing_ids(self, small_store):
        e = small_store.entry(0)
        with pytest.raises(StoreError):
            ReferenceStore([e, e], small_store.embedding_dim)

    def test_embedding_dim_checked(self, small_store):
        e = small_store.entry(0)
        with pytest.raises(StoreError):
            ReferenceStore([e], small_store.embedding_dim + 1)

    def test_empty_store_has_no_pathways(self):
        store = ReferenceStore([], 16)
        assert len(store) == 0
        assert store.embeddings.shape == (0, 16)
        with pytest.raises(StoreError):
            store.pathways


class TestStorePersistence:
    def test_round_trip_hash_and_bits(self, tmp_path, small_store):
        path = tmp_path / "store.jsonl"
        save_store(small_store, path)
        loaded = load_store(path)
        assert store_hash(loaded) == store_hash(small_store)
        assert len(loaded) == len(small_store)
        for a, b in zip(small_store, loaded):
            assert a.id == b.id and a.label == b.label and a.meta == b.meta
            assert a.input.tobytes() == b.input.tobytes()
            assert a.embedding.tobytes() == b.embedding.tobytes()
            assert a.pathway.tobytes() == b.pathway.tobytes()
        assert loaded.provenance == small_store.provenance

    def test_double_round_trip_is_stable(self, tmp_path, small_store):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_store(small_store, p1)
        save_store(load_store(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"kind":"not-a-store","schema":1}\n')
        with pytest.raises(SerializationError, match="line 1"):
            load_store(path)

    def test_bad_json_line_numbered(self, tmp_path, small_store):
        path = tmp_path / "store.jsonl"
        save_store(small_store, path)
        lines = path.read_text().splitlines()
        lines[3] = lines[3][:-10]  # truncate an entry record
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(SerializationError, match="line 4"):
            load_store(path)

    def test_entry_count_checked(self, tmp_path, small_store):
        path = tmp_path / "store.jsonl"
        save_store(small_store, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")  # drop the last entry
        with pytest.raises(SerializationError, match="entries"):
            load_store(path)

    def test_missing_field_rejected(self, tmp_path, small_store):
        import json

        path = tmp_path / "store.jsonl"
        save_store(small_store, path)
        lines = path.read_text().splitlines()
        rec = json.loads(lines[1])
        del rec["pathway"]
        lines[1] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(SerializationError, match="line 2"):
            load_store(path)


class TestVerifyStore:
    def test_clean_store_passes(self, small_bench, small_store):
        assert verify_store(small_store) == []
        assert verify_store(small_store, model=small_bench[0]) == []

    def _clone_with(self, store, **overrides):
        entries = [
            ReferenceEntry(
                id=e.id,
                label=overrides.get("label", e.label) if e.id == 0 else e.label,
                input=e.input,
                embedding=overrides.get("embedding", e.embedding)
                if e.id == 0
                else e.embedding,
                pathway=overrides.get("pathway", e.pathway) if e.id == 0 else e.pathway,
                meta=e.meta,
            )
            for e in store
        ]
        return ReferenceStore(entries, store.embedding_dim, store.provenance)

    def test_detects_bad_embedding_norm(self, small_store):
        bad = self._clone_with(small_store, embedding=small_store.entry(0).embedding * 2)
        problems = verify_store(bad)
        assert any("embedding norm" in p for p in problems)

    def test_detects_broken_pathway_rows(self, small_store):
        pw = small_store.entry(0).pathway.copy()
        pw[0, 0] *= 3.0
        problems = verify_store(self._clone_with(small_store, pathway=pw))
        assert any("sum to 1" in p for p in problems)

    def test_detects_stale_verdict(self, small_bench, small_store):
        model = small_bench[0]
        wrong = (small_store.entry(0).label + 1) % 4
        problems = verify_store(self._clone_with(small_store, label=wrong), model=model)
        assert any("no longer correct" in p for p in problems)
