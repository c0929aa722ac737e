import itertools
import json

import numpy as np
import pytest

from lami.descriptions import VisualDescription
from lami.embeddings import (
    EmbeddingMatrix,
    FixtureProvider,
    SyntheticProvider,
    TokenHashProvider,
    WrappedProvider,
    cosine_matrix,
    embed_classifier,
    embed_semantic,
    load_embeddings,
    read_lemb_block,
    save_embeddings,
    synthetic_embed,
    write_lemb_block,
)
from lami.errors import EmbeddingError


def desc(cid, text):
    return VisualDescription(concept_id=cid, kind="base", text=text, provenance="fixture")


class TestSyntheticEmbed:
    def test_deterministic(self):
        a = synthetic_embed("sea lion", 32, seed=7)
        b = synthetic_embed("sea lion", 32, seed=7)
        np.testing.assert_array_equal(a, b)

    def test_unit_norm(self):
        v = synthetic_embed("anything", 48, seed=0)
        assert abs(np.linalg.norm(v) - 1.0) < 1e-9

    def test_seed_and_text_sensitivity(self):
        assert not np.allclose(synthetic_embed("a", 32, 0), synthetic_embed("b", 32, 0))
        assert not np.allclose(synthetic_embed("a", 32, 0), synthetic_embed("a", 32, 1))

    def test_dim_too_small(self):
        with pytest.raises(EmbeddingError, match="dim"):
            synthetic_embed("x", 1, 0)

    def test_pairwise_cosine_bound(self):
        # exhaustive scan over all pairs of 100 distinct texts at dim 64
        vecs = [synthetic_embed(f"text-{i}", 64, seed=3) for i in range(100)]
        worst = max(abs(float(np.dot(a, b))) for a, b in itertools.combinations(vecs, 2))
        assert worst < 0.9


class TestEmbedOperations:
    def test_identical_texts_identical_rows(self):
        m = embed_semantic([desc(0, "same"), desc(1, "same")], SyntheticProvider(16, 0))
        np.testing.assert_array_equal(m.rows[0], m.rows[1])
        assert m.space == "semantic"

    def test_rows_are_normalized_provider_output(self):
        class Scaled:
            dim = 8

            def embed_text(self, text):
                return np.full(8, 3.0)

        m = embed_semantic([desc(0, "x")], Scaled())
        np.testing.assert_allclose(m.rows[0], np.full(8, 3.0) / np.linalg.norm(np.full(8, 3.0)), rtol=1e-6)

    def test_dim_mismatch(self):
        class Bad:
            dim = 8

            def embed_text(self, text):
                return np.zeros(4)

        with pytest.raises(EmbeddingError, match="dim"):
            embed_semantic([desc(0, "x")], Bad())

    def test_row_order_is_function_of_ids(self):
        provider = SyntheticProvider(16, 0)
        a = embed_classifier([(2, "two"), (0, "zero"), (1, "one")], provider)
        b = embed_classifier([(0, "zero"), (1, "one"), (2, "two")], provider)
        assert a.ids == b.ids == (0, 1, 2)
        np.testing.assert_array_equal(a.rows, b.rows)

    def test_name_vs_description_texts_differ(self):
        provider = SyntheticProvider(16, 0)
        names = embed_classifier([(0, "cat"), (1, "dog")], provider)
        descs = embed_classifier([(0, "a small feline"), (1, "a loyal canine")], provider)
        assert names.ids == descs.ids
        assert not np.allclose(names.rows, descs.rows)

    def test_single_text(self):
        m = embed_classifier([(5, "lone")], SyntheticProvider(32, 0))
        assert m.rows.shape == (1, 32)
        assert m.ids == (5,)

    def test_cosine_matches_recomputation_from_raw_vectors(self):
        provider = SyntheticProvider(24, 9)
        texts = [(0, "ape"), (1, "bee"), (2, "cow")]
        m = embed_classifier(texts, provider)
        raw = {cid: provider.embed_text(t) for cid, t in texts}
        cos = cosine_matrix(m, m)
        for i, j in itertools.product(range(3), repeat=2):
            a, b = raw[i], raw[j]
            expected = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
            assert abs(cos[i, j] - expected) < 1e-6

    def test_duplicate_ids_rejected(self):
        with pytest.raises(EmbeddingError, match="duplicate"):
            embed_classifier([(0, "a"), (0, "b")], SyntheticProvider(8, 0))


class TestTokenHashProvider:
    def test_token_overlap_drives_similarity(self):
        p = TokenHashProvider(64, 0)
        same = float(np.dot(p.embed_text("red circle"), p.embed_text("circle red")))
        related = float(np.dot(p.embed_text("red circle"), p.embed_text("blue circle")))
        unrelated = float(np.dot(p.embed_text("red circle"), p.embed_text("green square")))
        assert same == pytest.approx(1.0, abs=1e-9)
        assert related > unrelated + 0.2

    def test_no_tokens(self):
        with pytest.raises(EmbeddingError, match="tokens"):
            TokenHashProvider(16, 0).embed_text("!!!")


class TestFixtureProvider:
    def test_file_round_trip_reproduces_embeddings_bit_exactly(self, tmp_path):
        provider = SyntheticProvider(16, 1)
        texts = [(0, "alpha"), (1, "beta")]
        original = embed_classifier(texts, provider)
        fixture_path = tmp_path / "fixture.json"
        FixtureProvider(
            {t: [float(x) for x in original.row_for(cid)] for cid, t in texts}
        ).save(fixture_path)
        reloaded_provider = FixtureProvider.from_file(fixture_path)
        again = embed_classifier(texts, reloaded_provider)
        assert again.rows.tobytes() == original.rows.tobytes()

    def test_unknown_text(self):
        p = FixtureProvider({"a": [1.0, 0.0]})
        with pytest.raises(EmbeddingError, match="no embedding"):
            p.embed_text("b")

    def test_mixed_dims_rejected(self):
        with pytest.raises(EmbeddingError, match="mixed"):
            FixtureProvider({"a": [1.0, 0.0], "b": [1.0, 0.0, 0.0]})


class TestWrappedProvider:
    def test_wrapper_changes_embedding(self):
        inner = SyntheticProvider(16, 0)
        wrapped = WrappedProvider(inner, "a photo of a {}")
        np.testing.assert_array_equal(
            wrapped.embed_text("cat"), inner.embed_text("a photo of a cat")
        )

    def test_template_must_have_placeholder(self):
        with pytest.raises(EmbeddingError, match="template"):
            WrappedProvider(SyntheticProvider(16, 0), "no placeholder")


class TestLembContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        m = embed_semantic([desc(i, f"t{i}") for i in range(5)], SyntheticProvider(32, 2))
        path = tmp_path / "emb.lemb"
        save_embeddings(m, path, metadata={"provider": "synthetic"})
        loaded = load_embeddings(path)
        assert loaded.space == m.space
        assert loaded.ids == m.ids
        assert loaded.rows.tobytes() == m.rows.tobytes()
        sidecar = json.loads((tmp_path / "emb.lemb.json").read_text())
        assert sidecar["space"] == "semantic" and sidecar["count"] == 5

    def test_second_save_is_byte_identical(self, tmp_path):
        m = embed_semantic([desc(0, "a"), desc(3, "b")], SyntheticProvider(16, 0))
        p1, p2 = tmp_path / "a.lemb", tmp_path / "b.lemb"
        save_embeddings(m, p1)
        save_embeddings(load_embeddings(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.lemb"
        path.write_bytes(b"NOPE" + bytes(17))
        with pytest.raises(EmbeddingError, match="magic"):
            load_embeddings(path)

    def test_truncated(self, tmp_path):
        m = embed_semantic([desc(0, "a")], SyntheticProvider(8, 0))
        path = tmp_path / "t.lemb"
        save_embeddings(m, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(EmbeddingError, match="size mismatch"):
            load_embeddings(path)

    def test_raw_block_preserves_non_unit_rows(self, tmp_path):
        rows = np.array([[3.0, 4.0], [0.5, 0.25]], dtype=np.float32)
        path = tmp_path / "raw.lemb"
        write_lemb_block(path, "semantic", [0, 1], rows)
        space, ids, loaded = read_lemb_block(path)
        assert space == "semantic" and ids == (0, 1)
        np.testing.assert_array_equal(loaded, rows)


class TestMatrixInvariants:
    def test_unsorted_ids_rejected(self):
        rows = np.eye(2, dtype=np.float32)
        with pytest.raises(EmbeddingError, match="ascending"):
            EmbeddingMatrix(space="semantic", dim=2, ids=(1, 0), rows=rows)

    def test_non_unit_rows_rejected(self):
        rows = np.array([[2.0, 0.0]], dtype=np.float32)
        with pytest.raises(EmbeddingError, match="unit"):
            EmbeddingMatrix(space="semantic", dim=2, ids=(0,), rows=rows)

    def test_unknown_space_rejected(self):
        with pytest.raises(EmbeddingError, match="space"):
            EmbeddingMatrix(space="visual", dim=2, ids=(0,), rows=np.eye(1, 2, dtype=np.float32))

    def test_submatrix(self):
        m = embed_classifier([(0, "a"), (1, "b"), (2, "c")], SyntheticProvider(8, 0))
        sub = m.submatrix([2, 0])
        assert sub.ids == (0, 2)
        np.testing.assert_array_equal(sub.row_for(2), m.row_for(2))

    def test_rows_readonly(self):
        m = embed_classifier([(0, "a")], SyntheticProvider(8, 0))
        with pytest.raises(ValueError):
            m.rows[0, 0] = 5.0
