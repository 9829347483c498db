import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from deepnose.errors import ConvergenceFailure, DegenerateConfiguration
from deepnose.molecule_io import DescriptorVocabulary, LabelTable
from deepnose.odor_space import (
    ZERO_DISTANCE, WeightedGraph, alignment_residual, alignment_text, classical_mds, embed_graph,
    embedding_csv, geodesic_distances, knn_graph, pairwise_distances, procrustes_rotate,
    prune_long_links, semantic_graph, top_eigenpairs,
)

from oracles import floyd_warshall, mds_eigh


def leff_table(rows):
    vocab = DescriptorVocabulary.from_lists([["a", "b", "c", "d"], [], [], []])
    labels = np.array(rows, dtype=np.uint8)
    mask = np.zeros((len(rows), 4), dtype=bool)
    mask[:, 0] = True
    return LabelTable(vocab, [10 * (i + 1) for i in range(len(rows))], labels, mask)


def dense(g):
    return g.adjacency().toarray()


class TestGraphs:
    def test_semantic_weights(self):
        g = semantic_graph(leff_table([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [1, 0, 1, 0]]))
        a = dense(g)
        assert a[0, 1] == pytest.approx(0.5)  # two shared descriptors
        assert a[0, 2] == 0 and a[1, 2] == 0  # disjoint: no edge
        assert a[0, 3] == 1.0 and a[2, 3] == 1.0
        assert g.labels == [10, 20, 30, 40]

    def test_semantic_rows_follow_dataset(self):
        t = leff_table([[1, 0, 0, 0], [1, 0, 0, 0], [1, 0, 0, 0]])
        t.dataset_mask[1] = [False, True, False, False]
        assert semantic_graph(t).labels == [10, 30]

    def test_knn_two_clusters(self, rng):
        x = np.r_[rng.normal(size=(5, 3)) * 0.1, 100 + rng.normal(size=(5, 3)) * 0.1]
        g = knn_graph(x, k=1)
        comp = g.components()
        assert not set(comp[:5]) & set(comp[5:])
        assert len(set(knn_graph(x, k=4).components())) == 2

    def test_knn_complete(self, rng):
        g = knn_graph(rng.normal(size=(6, 2)), k=5)
        assert g.n_edges == 15

    def test_duplicates_get_epsilon(self):
        g = knn_graph(np.array([[0.0, 0], [0, 0], [3, 4]]), k=1)
        a = dense(g)
        assert a[0, 1] == ZERO_DISTANCE
        assert a[1, 2] == pytest.approx(5.0) or a[0, 2] == pytest.approx(5.0)

    def test_graph_validation(self):
        with pytest.raises(ValueError):
            WeightedGraph(3, [1], [0], [1.0])
        with pytest.raises(ValueError):
            WeightedGraph(3, [0], [1], [0.0])

    def test_pruning_keeps_each_nodes_shortest_edge(self, rng):
        x = rng.normal(size=(30, 2))
        g = knn_graph(x, k=29)
        pruned = prune_long_links(g, 1)
        a, full = dense(pruned), dense(g)
        for v in range(30):
            nearest = np.min(full[v][np.arange(30) != v])
            assert nearest in a[v]


class TestGeodesics:
    def test_path(self):
        geo = geodesic_distances(WeightedGraph(3, [0, 1], [1, 2], [1.0, 1.0]))
        assert geo.distances[0, 2] == 2.0

    def test_matches_floyd_warshall(self, rng):
        n = 25
        i, j = np.triu_indices(n, 1)
        keep = rng.random(len(i)) < 0.25
        w = rng.uniform(0.5, 3, size=keep.sum())
        g = WeightedGraph(n, i[keep], j[keep], w)
        geo = geodesic_distances(g, k_prune=None)
        ref = floyd_warshall(n, zip(i[keep], j[keep], w))
        np.testing.assert_allclose(geo.distances, ref[np.ix_(geo.nodes, geo.nodes)], atol=1e-12)

    def test_geodesic_at_least_euclidean_and_triangle(self, rng):
        x = rng.random((60, 3))
        geo = geodesic_distances(knn_graph(x, 6), k_prune=10)
        d = geo.distances
        eu = pairwise_distances(x[geo.nodes])
        assert np.all(d >= eu - 1e-12)
        for _ in range(300):
            a, b, c = rng.integers(len(d), size=3)
            assert d[a, c] <= d[a, b] + d[b, c] + 1e-12

    def test_largest_component_and_exclusions(self):
        g = WeightedGraph(5, [0, 1, 3], [1, 2, 4], [1.0, 1.0, 1.0])
        geo = geodesic_distances(g)
        np.testing.assert_array_equal(geo.nodes, [0, 1, 2])
        np.testing.assert_array_equal(geo.excluded, [3, 4])


class TestMds:
    def test_equilateral_triangle(self):
        D = np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]], dtype=float)
        emb = classical_mds(D)
        np.testing.assert_allclose(pairwise_distances(emb.coords), D, atol=1e-6)

    def test_regular_tetrahedron_repeated_eigenvalue(self):
        x = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
        D = pairwise_distances(x)
        emb = classical_mds(D)
        np.testing.assert_allclose(emb.eigenvalues, [4, 4, 4], atol=1e-9)
        np.testing.assert_allclose(pairwise_distances(emb.coords), D, atol=1e-6)

    def test_roundtrip_3d_points(self, rng):
        corners = np.array([[0, 0, 0], [4, 0, 0], [0, 3, 0], [0, 0, 2]], dtype=float)
        w = rng.dirichlet(np.ones(4), size=40)
        x = w @ corners
        D = pairwise_distances(x)
        emb = classical_mds(D)
        np.testing.assert_allclose(pairwise_distances(emb.coords), D, atol=1e-6)
        assert emb.stress < 1e-6

    def test_matches_eigh_oracle(self, rng):
        x = rng.normal(size=(30, 5)) * [5, 3, 2, 0.5, 0.1]
        D = pairwise_distances(x)
        emb = classical_mds(D, tol=1e-12)
        ref, vals = mds_eigh(D)
        np.testing.assert_allclose(emb.eigenvalues, vals, rtol=1e-8)
        # columns agree up to sign
        for k in range(3):
            s = np.sign(emb.coords[:, k] @ ref[:, k])
            np.testing.assert_allclose(emb.coords[:, k], s * ref[:, k], atol=1e-5)

    def test_all_zero(self):
        emb = classical_mds(np.zeros((4, 4)))
        np.testing.assert_array_equal(emb.coords, 0)

    def test_deterministic(self, rng):
        D = pairwise_distances(rng.normal(size=(20, 3)))
        np.testing.assert_array_equal(classical_mds(D).coords, classical_mds(D).coords)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            classical_mds(np.array([[0, 1], [2, 0]], dtype=float))
        with pytest.raises(ValueError):
            classical_mds(np.ones((3, 3)))

    def test_convergence_failure_reports_residuals(self):
        # eigenvalues +1 and -1 from e1: power iteration oscillates forever
        B = np.array([[0.0, 1.0], [1.0, 0.0]])
        with pytest.raises(ConvergenceFailure) as e:
            top_eigenpairs(B, 1, max_iter=50)
        assert len(e.value.residuals) == 1 and e.value.residuals[0] > 0


class TestProcrustes:
    def test_planted_rotation(self, rng):
        X = rng.normal(size=(50, 3))
        R = Rotation.random(random_state=3).as_matrix()
        got = procrustes_rotate(X, X @ R.T + [1, 2, 3])
        np.testing.assert_allclose(got, R, atol=1e-9)

    def test_identity(self, rng):
        X = rng.normal(size=(10, 3))
        np.testing.assert_allclose(procrustes_rotate(X, X), np.eye(3), atol=1e-12)

    def test_reflection_stays_proper(self, rng):
        X = rng.normal(size=(20, 3))
        Y = X * [-1, 1, 1]
        R = procrustes_rotate(X, Y)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)
        assert alignment_residual(X, Y, R) > 1e-3

    def test_always_orthonormal(self, rng):
        for _ in range(50):
            R = procrustes_rotate(rng.normal(size=(6, 3)), rng.normal(size=(6, 3)))
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
            assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)

    def test_degenerate(self):
        line = np.outer(np.arange(5.0), [1, 2, 3])
        with pytest.raises(DegenerateConfiguration):
            procrustes_rotate(line, line)
        with pytest.raises(ValueError):
            procrustes_rotate(np.zeros((2, 3)), np.zeros((2, 3)))


class TestOutputs:
    def test_embed_graph_and_files(self, rng):
        x = rng.random((20, 3))
        g = knn_graph(x, 5, labels=[100 + i for i in range(20)])
        cids, emb, geo = embed_graph(g)
        assert cids == [100 + i for i in geo.nodes]
        text = embedding_csv([("semantic", cids, emb.coords)], {"k": 5})
        lines = text.splitlines()
        assert lines[0] == "# k: 5" and lines[1] == "cid,x,y,z,source"
        assert lines[2].startswith(f"{cids[0]},") and lines[2].endswith(",semantic")
        al = alignment_text(np.eye(3), 0.25, {"k_prune": 10}).splitlines()
        assert al == ["# k_prune: 10", "rotation", "1 0 0", "0 1 0", "0 0 1", "residual 0.25"]
