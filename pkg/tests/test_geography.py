"""Geography construction, ICAR scaling and population aggregation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saedisagg.errors import StructuralError
from saedisagg.geography import (
    AdjacencyGraph,
    PopulationTable,
    aggregate_populations,
    build_hierarchy,
    icar_scaling_factor,
    scaled_structure,
)


def pinv_marginal_variances(graph):
    """Oracle: dense pseudo-inverse of the full Laplacian.

    The Moore-Penrose pseudo-inverse equals the sum-to-zero constrained
    generalized inverse per component because the Laplacian null space is
    spanned by the per-component constant vectors.
    """
    lap = graph.laplacian().toarray()
    diag = np.diag(np.linalg.pinv(lap)).copy()
    for comp in graph.components():
        if len(comp) == 1:
            diag[list(comp)] = 1.0
    return diag


def path_graph(n):
    nodes = tuple(f"s{k}" for k in range(n))
    edges = tuple((f"s{k}", f"s{k + 1}") for k in range(n - 1))
    return AdjacencyGraph(nodes=nodes, edges=edges)


class TestBuildHierarchy:
    def test_small_build(self):
        hier, graph = build_hierarchy(
            [("s1", "a1"), ("s2", "a1"), ("s3", "a2"), ("s4", "a2")],
            [("s1", "s2"), ("s2", "s3"), ("s3", "s4")],
        )
        assert hier.coarse_areas == ("a1", "a2")
        assert hier.parent["s3"] == "a2"
        assert list(graph.neighbor_counts) == [1, 2, 2, 1]

    def test_dangling_edge_endpoint(self):
        with pytest.raises(StructuralError):
            build_hierarchy([("s1", "a1")], [("s1", "sX")])

    def test_self_loop(self):
        with pytest.raises(StructuralError):
            build_hierarchy([("s1", "a1"), ("s2", "a1")], [("s1", "s1")])

    def test_duplicate_subarea(self):
        with pytest.raises(StructuralError):
            build_hierarchy([("s1", "a1"), ("s1", "a2")], [])

    def test_deterministic_ordering(self):
        hier, _ = build_hierarchy(
            [("s2", "a1"), ("s1", "a1")], [("s1", "s2")]
        )
        assert hier.subareas == ("s1", "s2")


class TestIcarScaling:
    def test_p3_factor(self):
        graph = path_graph(3)
        # pinv marginal variances of the P3 Laplacian are (5/9, 2/9, 5/9)
        v = pinv_marginal_variances(graph)
        np.testing.assert_allclose(v, [5 / 9, 2 / 9, 5 / 9], atol=1e-12)
        expected = float(np.exp(np.log(v).mean()))
        assert abs(expected - 0.4094) < 1e-3
        assert icar_scaling_factor(graph) == pytest.approx(expected, abs=1e-10)

    def test_two_disconnected_edges(self):
        graph = AdjacencyGraph(
            nodes=("s0", "s1", "s2", "s3"),
            edges=(("s0", "s1"), ("s2", "s3")),
        )
        assert icar_scaling_factor(graph) == pytest.approx(0.25, abs=1e-12)

    def test_k2(self):
        graph = AdjacencyGraph(nodes=("s0", "s1"), edges=(("s0", "s1"),))
        assert icar_scaling_factor(graph) == pytest.approx(0.25, abs=1e-12)

    def test_empty_graph_rejected(self):
        with pytest.raises(ValueError):
            icar_scaling_factor(AdjacencyGraph(nodes=(), edges=()))

    def test_isolated_node_contributes_one(self):
        graph = AdjacencyGraph(
            nodes=("s0", "s1", "s2"), edges=(("s0", "s1"),)
        )
        # geometric mean over variances (0.25, 0.25, 1)
        assert icar_scaling_factor(graph) == pytest.approx(
            (0.25 * 0.25 * 1.0) ** (1 / 3), abs=1e-12
        )


class TestScaledStructure:
    def test_p3_scaled_matrix(self):
        graph = path_graph(3)
        ss = scaled_structure(graph)
        factor = icar_scaling_factor(graph)
        expected = graph.laplacian().toarray() * factor
        np.testing.assert_allclose(ss.precision.toarray(), expected, atol=1e-12)
        np.testing.assert_allclose(
            np.asarray(ss.precision.sum(axis=1)).ravel(), 0.0, atol=1e-12
        )

    def test_scaled_geometric_mean_is_one(self):
        graph = path_graph(5)
        ss = scaled_structure(graph)
        scaled_graph = AdjacencyGraph(nodes=graph.nodes, edges=graph.edges)
        v = np.diag(np.linalg.pinv(ss.precision.toarray()))
        assert np.exp(np.log(v).mean()) == pytest.approx(1.0, abs=1e-6)
        assert scaled_graph.nodes == graph.nodes

    def test_isolated_node_zero_row(self):
        graph = AdjacencyGraph(
            nodes=("s0", "s1", "s2"), edges=(("s0", "s1"),)
        )
        ss = scaled_structure(graph)
        assert ss.precision[2].nnz == 0
        assert ((2,) in ss.components)
        assert ss.singleton_mask.tolist() == [False, False, True]

    def test_symmetry_preserved(self):
        rng = np.random.default_rng(7)
        nodes = tuple(f"s{k}" for k in range(12))
        edges = set()
        for _ in range(18):
            a, b = rng.choice(12, size=2, replace=False)
            a, b = int(min(a, b)), int(max(a, b))
            edges.add((f"s{a}", f"s{b}"))
        ss = scaled_structure(AdjacencyGraph(nodes=nodes, edges=tuple(edges)))
        dense = ss.precision.toarray()
        np.testing.assert_allclose(dense, dense.T, atol=1e-14)

    def test_random_graphs_match_pinv_oracle(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            n = int(rng.integers(3, 30))
            edges = set()
            for _ in range(int(rng.integers(n - 1, 3 * n))):
                a, b = rng.choice(n, size=2, replace=False)
                a, b = int(min(a, b)), int(max(a, b))
                edges.add((f"s{a:02d}", f"s{b:02d}"))
            nodes = tuple(f"s{k:02d}" for k in range(n))
            graph = AdjacencyGraph(nodes=nodes, edges=tuple(edges))
            ss = scaled_structure(graph)
            v = np.diag(np.linalg.pinv(ss.precision.toarray())).copy()
            mask = ~ss.singleton_mask
            if mask.any():
                geo = np.exp(np.log(v[mask]).mean())
                assert geo == pytest.approx(1.0, abs=1e-6)


class TestAdjacencyInvariants:
    @given(st.integers(min_value=2, max_value=25), st.integers(min_value=0, max_value=60))
    @settings(max_examples=25, deadline=None)
    def test_degree_matches_brute_force(self, n, n_draws):
        rng = np.random.default_rng(n * 1000 + n_draws)
        edges = set()
        for _ in range(n_draws):
            a, b = rng.choice(n, size=2, replace=False)
            a, b = int(min(a, b)), int(max(a, b))
            edges.add((f"s{a:03d}", f"s{b:03d}"))
        nodes = tuple(f"s{k:03d}" for k in range(n))
        graph = AdjacencyGraph(nodes=nodes, edges=tuple(edges))
        brute = np.zeros(n, dtype=int)
        for a, b in graph.edges:
            brute[graph.node_index[a]] += 1
            brute[graph.node_index[b]] += 1
        assert list(graph.neighbor_counts) == list(brute)
        lap = graph.laplacian().toarray()
        np.testing.assert_allclose(lap, lap.T)


class TestPopulations:
    def test_aggregate_two_children(self):
        hier, _ = build_hierarchy([("j1", "i1"), ("j2", "i1")], [])
        pop = PopulationTable.from_records([("j1", "all", 60), ("j2", "all", 40)])
        coarse = aggregate_populations(pop, hier)
        assert coarse.count("i1", "all") == 100

    def test_aggregate_two_groups(self):
        hier, _ = build_hierarchy([("j1", "i1"), ("j2", "i1")], [])
        pop = PopulationTable.from_records(
            [("j1", "a", 10), ("j1", "b", 20), ("j2", "a", 30), ("j2", "b", 40)]
        )
        coarse = aggregate_populations(pop, hier)
        assert coarse.count("i1", "a") == 40
        assert coarse.count("i1", "b") == 60

    def test_zero_population_ok(self):
        hier, _ = build_hierarchy([("j1", "i1"), ("j2", "i1")], [])
        pop = PopulationTable.from_records([("j1", "all", 0), ("j2", "all", 5)])
        coarse = aggregate_populations(pop, hier)
        assert coarse.count("i1", "all") == 5

    def test_unknown_subarea_rejected(self):
        hier, _ = build_hierarchy([("j1", "i1")], [])
        pop = PopulationTable.from_records([("jX", "all", 10)])
        with pytest.raises(StructuralError):
            aggregate_populations(pop, hier)

    def test_conservation(self):
        hier, _ = build_hierarchy(
            [("j1", "i1"), ("j2", "i1"), ("j3", "i2")], []
        )
        pop = PopulationTable.from_records(
            [("j1", "a", 1.5), ("j2", "a", 2.25), ("j3", "a", 4.125),
             ("j1", "b", 0.5), ("j3", "b", 8.0)]
        )
        coarse = aggregate_populations(pop, hier)
        assert coarse.grand_total() == pop.grand_total()
