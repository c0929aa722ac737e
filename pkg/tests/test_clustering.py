import numpy as np
import pytest

from helpers import inclusion_probabilities  # noqa: F401  (shared module also used elsewhere)
from lami.clustering import (
    ClusterModel,
    fit_clusters,
    load_cluster_model,
    save_cluster_model,
    visually_similar_set,
)
from lami.embeddings import EmbeddingMatrix
from lami.errors import ClusterError


def matrix_from_rows(rows, space="semantic", ids=None):
    rows = np.asarray(rows, dtype=np.float64)
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    ids = tuple(range(len(rows))) if ids is None else tuple(ids)
    return EmbeddingMatrix(space=space, dim=rows.shape[1], ids=ids, rows=rows.astype(np.float32))


def two_blobs(n_per=20, dim=16, seed=0):
    """Two tight unit-vector blobs around near-orthogonal centers."""
    rng = np.random.default_rng(seed)
    centers = np.zeros((2, dim))
    centers[0, 0] = 1.0
    centers[1, 1] = 1.0
    rows = []
    membership = []
    for b in range(2):
        for _ in range(n_per):
            rows.append(centers[b] + 0.02 * rng.standard_normal(dim))
            membership.append(b)
    return matrix_from_rows(rows), membership


class TestFitClusters:
    def test_k1_groups_everything(self):
        m = matrix_from_rows(np.eye(4))
        model = fit_clusters(m, K=1, seed=0)
        assert set(model.assignment.values()) == {0}
        np.testing.assert_allclose(
            model.centroids[0], m.rows.astype(np.float64).mean(axis=0), atol=1e-12
        )

    def test_two_blobs_recover_membership(self):
        m, membership = two_blobs()
        model = fit_clusters(m, K=2, seed=1)
        labels = [model.assignment[i] for i in m.ids]
        # partition equality up to relabeling
        mapping = {labels[0]: membership[0], labels[-1]: membership[-1]}
        assert len(mapping) == 2
        assert [mapping[l] for l in labels] == membership

    def test_every_point_nearest_its_centroid(self):
        m, _ = two_blobs(seed=3)
        model = fit_clusters(m, K=2, seed=5)
        points = m.rows.astype(np.float64)
        for i, cid in enumerate(m.ids):
            d = np.linalg.norm(model.centroids - points[i], axis=1)
            assert d[model.assignment[cid]] <= d.min() + 1e-6

    def test_k_exceeds_n(self):
        m = matrix_from_rows(np.eye(3))
        with pytest.raises(ClusterError, match="exceeds"):
            fit_clusters(m, K=4, seed=0)

    def test_wrong_space(self):
        m = matrix_from_rows(np.eye(3), space="classifier")
        with pytest.raises(ClusterError, match="wrong embedding space"):
            fit_clusters(m, K=1, seed=0)

    def test_same_seed_bit_identical(self):
        m, _ = two_blobs(seed=7)
        a = fit_clusters(m, K=4, seed=11)
        b = fit_clusters(m, K=4, seed=11)
        assert a.assignment == b.assignment
        np.testing.assert_array_equal(a.centroids, b.centroids)
        assert a.inertia == b.inertia

    def test_different_seeds_same_partition_on_separable_data(self):
        m, membership = two_blobs(seed=2)
        partitions = []
        for seed in (0, 1, 2):
            model = fit_clusters(m, K=2, seed=seed)
            labels = tuple(model.assignment[i] for i in m.ids)
            canon = tuple(labels[0] == l for l in labels)  # relabel-invariant encoding
            partitions.append(canon)
        assert partitions[0] == partitions[1] == partitions[2]

    def test_inertia_is_sum_of_squared_distances(self):
        m, _ = two_blobs(n_per=5, seed=4)
        model = fit_clusters(m, K=2, seed=0)
        points = m.rows.astype(np.float64)
        expected = sum(
            float(np.sum((points[i] - model.centroids[model.assignment[cid]]) ** 2))
            for i, cid in enumerate(m.ids)
        )
        assert model.inertia == pytest.approx(expected, rel=1e-9)

    def test_duplicate_points_with_k_equal_n(self):
        # forces the empty-cluster re-seeding path to run deterministically
        rows = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        m = matrix_from_rows(rows)
        model = fit_clusters(m, K=3, seed=0)
        assert len(model.assignment) == 3


class TestVisuallySimilarSet:
    def test_empty_gt(self):
        m = matrix_from_rows(np.eye(3))
        model = fit_clusters(m, K=2, seed=0)
        assert visually_similar_set(model, set()) == set()

    def test_direct_definition(self):
        model = ClusterModel(
            K=2,
            centroids=np.zeros((2, 4)),
            assignment={10: 0, 11: 0, 12: 1},
            seed=0,
            inertia=0.0,
        )
        assert visually_similar_set(model, {10}) == {10, 11}
        assert visually_similar_set(model, {12}) == {12}

    def test_superset_of_gt(self):
        m, _ = two_blobs(seed=9)
        model = fit_clusters(m, K=3, seed=1)
        gt = {0, 21}
        assert gt <= visually_similar_set(model, gt)

    def test_matches_brute_force_same_cluster_scan(self):
        rng = np.random.default_rng(0)
        rows = rng.standard_normal((50, 8))
        m = matrix_from_rows(rows)
        model = fit_clusters(m, K=6, seed=3)
        for _ in range(25):
            gt = set(rng.choice(50, size=rng.integers(1, 5), replace=False).tolist())
            brute = {
                cid
                for cid in m.ids
                if any(model.assignment[cid] == model.assignment[g] for g in gt)
            }
            assert visually_similar_set(model, gt) == brute

    def test_monotone_in_gt(self):
        rng = np.random.default_rng(5)
        rows = rng.standard_normal((30, 8))
        model = fit_clusters(matrix_from_rows(rows), K=5, seed=0)
        for _ in range(20):
            g2 = set(rng.choice(30, size=6, replace=False).tolist())
            g1 = set(list(g2)[:3])
            assert visually_similar_set(model, g1) <= visually_similar_set(model, g2)

    def test_unknown_id(self):
        m = matrix_from_rows(np.eye(3))
        model = fit_clusters(m, K=1, seed=0)
        with pytest.raises(ClusterError, match="not in cluster model"):
            visually_similar_set(model, {99})


class TestPersistence:
    def test_round_trip(self, tmp_path):
        m, _ = two_blobs(n_per=6, seed=1)
        model = fit_clusters(m, K=3, seed=2)
        path = tmp_path / "model.json"
        save_cluster_model(model, path)
        loaded = load_cluster_model(path)
        assert loaded.K == model.K
        assert loaded.assignment == model.assignment
        assert loaded.seed == model.seed
        assert loaded.inertia == model.inertia

    def test_second_save_byte_identical(self, tmp_path):
        m, _ = two_blobs(n_per=4, seed=8)
        model = fit_clusters(m, K=2, seed=0)
        p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
        save_cluster_model(model, p1)
        save_cluster_model(load_cluster_model(p1), p2)
        assert (
            p1.read_bytes().replace(b"m1.json", b"m.json")
            == p2.read_bytes().replace(b"m2.json", b"m.json")
        )
        assert (tmp_path / "m1.json.centroids.lemb").read_bytes() == (
            tmp_path / "m2.json.centroids.lemb"
        ).read_bytes()

    def test_malformed_model_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ClusterError, match="cannot load"):
            load_cluster_model(path)
