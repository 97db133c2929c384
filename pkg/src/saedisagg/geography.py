"""Two-level administrative geography and the scaled ICAR structure.

A geography is a set of subareas, each nested in exactly one coarse area,
plus an undirected adjacency graph among subareas.  The spatial smoothing
prior (BYM2) needs the graph Laplacian rescaled so that the geometric mean
of the ICAR marginal variances, taken under a per-component sum-to-zero
constraint, equals one.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .errors import DataError, StructuralError


@dataclass(frozen=True)
class AreaHierarchy:
    """Ordered subarea and coarse-area identifiers with the parent map."""

    subareas: tuple
    coarse_areas: tuple
    parent: dict

    def __post_init__(self):
        if len(set(self.subareas)) != len(self.subareas):
            raise StructuralError("duplicate subarea identifiers")
        if len(set(self.coarse_areas)) != len(self.coarse_areas):
            raise StructuralError("duplicate coarse identifiers")
        coarse = set(self.coarse_areas)
        for j in self.subareas:
            if j not in self.parent:
                raise StructuralError(f"subarea {j!r} has no parent")
            if self.parent[j] not in coarse:
                raise StructuralError(
                    f"subarea {j!r} has unknown parent {self.parent[j]!r}"
                )
        children = set(self.parent.values())
        for i in self.coarse_areas:
            if i not in children:
                raise StructuralError(f"coarse area {i!r} has no subareas")

    @cached_property
    def subarea_index(self):
        return {j: k for k, j in enumerate(self.subareas)}

    @cached_property
    def coarse_index(self):
        return {i: k for k, i in enumerate(self.coarse_areas)}

    @cached_property
    def children(self):
        out = {i: [] for i in self.coarse_areas}
        for j in self.subareas:
            out[self.parent[j]].append(j)
        return {i: tuple(js) for i, js in out.items()}

    @property
    def n_subareas(self):
        return len(self.subareas)

    @property
    def n_coarse(self):
        return len(self.coarse_areas)


@dataclass(frozen=True)
class AdjacencyGraph:
    """Symmetric adjacency among subareas, stored as an edge list."""

    nodes: tuple
    edges: tuple  # pairs of node ids, each stored once with a < b

    def __post_init__(self):
        index = {v: k for k, v in enumerate(self.nodes)}
        seen = set()
        for a, b in self.edges:
            if a == b:
                raise StructuralError(f"self-loop on node {a!r}")
            if a not in index or b not in index:
                raise StructuralError(f"edge ({a!r}, {b!r}) has unknown endpoint")
            key = (a, b) if index[a] < index[b] else (b, a)
            if key in seen:
                raise StructuralError(f"duplicate edge ({a!r}, {b!r})")
            seen.add(key)

    @cached_property
    def node_index(self):
        return {v: k for k, v in enumerate(self.nodes)}

    @cached_property
    def edge_indices(self):
        """Edges as an (n_edges, 2) int array in node order."""
        idx = self.node_index
        if not self.edges:
            return np.zeros((0, 2), dtype=np.int64)
        arr = np.array([[idx[a], idx[b]] for a, b in self.edges], dtype=np.int64)
        return arr

    @cached_property
    def neighbor_counts(self):
        return np.bincount(
            self.edge_indices.ravel(), minlength=len(self.nodes)
        ).astype(np.int64)

    def laplacian(self):
        """Graph Laplacian D - W as a sparse CSR matrix."""
        n = len(self.nodes)
        e = self.edge_indices
        rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
        cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
        vals = np.concatenate(
            [-np.ones(2 * len(e)), self.neighbor_counts.astype(float)]
        )
        lap = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        lap.eliminate_zeros()
        return lap

    def components(self):
        """Connected components as tuples of node positions."""
        n = len(self.nodes)
        e = self.edge_indices
        adj = sp.csr_matrix(
            (np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)
        )
        k, labels = connected_components(adj, directed=False)
        return tuple(
            tuple(np.flatnonzero(labels == c)) for c in range(k)
        )


@dataclass(frozen=True)
class PopulationTable:
    """Non-negative population counts indexed by (area, group)."""

    counts: dict
    groups: tuple

    def __post_init__(self):
        for (area, group), value in self.counts.items():
            if group not in self.groups:
                raise StructuralError(f"count for unknown group {group!r}")
            if not np.isfinite(value) or value < 0:
                raise StructuralError(
                    f"negative or non-finite count for ({area!r}, {group!r})"
                )

    @classmethod
    def from_records(cls, records):
        """Build from an iterable of (area, group, count) triples."""
        counts = {}
        groups = []
        for area, group, value in records:
            key = (area, group)
            if key in counts:
                raise StructuralError(f"duplicate population cell {key!r}")
            counts[key] = float(value)
            if group not in groups:
                groups.append(group)
        return cls(counts=counts, groups=tuple(groups))

    @cached_property
    def areas(self):
        seen = []
        for area, _ in self.counts:
            if area not in seen:
                seen.append(area)
        return tuple(seen)

    def count(self, area, group):
        return self.counts.get((area, group), 0.0)

    def total(self, area):
        return sum(v for (a, _), v in self.counts.items() if a == area)

    def grand_total(self):
        return sum(self.counts.values())

    def matrix(self, areas):
        """Counts as an (n_areas, n_groups) array in the given area order."""
        out = np.zeros((len(areas), len(self.groups)))
        for r, area in enumerate(areas):
            for c, group in enumerate(self.groups):
                out[r, c] = self.count(area, group)
        return out


@dataclass(frozen=True)
class ScaledStructure:
    """Rescaled ICAR structure matrix with component bookkeeping.

    ``precision`` holds the per-component rescaled Laplacian: each connected
    component with two or more nodes is multiplied by the geometric mean of
    its ICAR marginal variances, so that after rescaling those variances have
    geometric mean one.  Isolated nodes keep a zero row/column and are
    handled as unit-variance unstructured effects downstream.
    """

    precision: sp.csr_matrix
    scaling_factor: float
    components: tuple
    component_factors: tuple

    @cached_property
    def singleton_mask(self):
        mask = np.zeros(self.precision.shape[0], dtype=bool)
        for comp in self.components:
            if len(comp) == 1:
                mask[list(comp)] = True
        return mask

    @cached_property
    def constraint_components(self):
        """Components of size >= 2, each of which carries a sum-to-zero constraint."""
        return tuple(c for c in self.components if len(c) > 1)


def build_hierarchy(subarea_records, adjacency_records):
    """Construct a validated hierarchy and adjacency graph from records.

    Parameters
    ----------
    subarea_records : iterable of (subarea_id, coarse_id)
    adjacency_records : iterable of (subarea_a, subarea_b)

    Identifiers are ordered lexicographically so the construction is
    deterministic regardless of input order.
    """
    parent = {}
    for j, i in subarea_records:
        if j in parent:
            raise StructuralError(f"duplicate subarea identifier {j!r}")
        parent[j] = i
    if not parent:
        raise StructuralError("no subareas")
    subareas = tuple(sorted(parent))
    coarse = tuple(sorted(set(parent.values())))
    hierarchy = AreaHierarchy(subareas=subareas, coarse_areas=coarse, parent=parent)

    idx = {j: k for k, j in enumerate(subareas)}
    edges = []
    seen = set()
    for a, b in adjacency_records:
        if a not in idx or b not in idx:
            raise StructuralError(f"edge ({a!r}, {b!r}) has unknown endpoint")
        if a == b:
            raise StructuralError(f"self-loop on node {a!r}")
        key = (a, b) if idx[a] < idx[b] else (b, a)
        if key not in seen:
            seen.add(key)
            edges.append(key)
    edges.sort(key=lambda e: (idx[e[0]], idx[e[1]]))
    graph = AdjacencyGraph(nodes=subareas, edges=tuple(edges))
    return hierarchy, graph


def _icar_marginal_variances(lap, size_dense=200):
    """Marginal variances of an ICAR block under its sum-to-zero constraint.

    For a connected component with Laplacian ``lap`` the constrained
    generalized inverse coincides with the Moore-Penrose pseudo-inverse.
    Small blocks use a dense eigendecomposition; larger ones ground one node
    (sparse LU) and undo the grounding with the rank-one centering identity
    diag(P K P) where P = I - 11'/n.
    """
    n = lap.shape[0]
    if n == 1:
        return np.ones(1)
    if n < size_dense:
        dense = lap.toarray() if sp.issparse(lap) else np.asarray(lap)
        vals, vecs = np.linalg.eigh(dense)
        tol = max(vals.max(), 1.0) * n * np.finfo(float).eps * 10
        pos = vals > tol
        pinv_diag = (vecs[:, pos] ** 2 / vals[pos]).sum(axis=1)
        return pinv_diag
    # ground node 0: K = (Q + c e0 e0')^{-1}, then diag(PKP) with P centering
    q = lap.tocsc().astype(float)
    c = float(q.diagonal().mean())
    grounded = q + sp.csc_matrix(([c], ([0], [0])), shape=q.shape)
    lu = splu(grounded)
    k_cols = lu.solve(np.eye(n))
    row_mean = k_cols.mean(axis=1)
    grand = row_mean.mean()
    return np.diag(k_cols) - 2.0 * row_mean + grand


def icar_scaling_factor(graph: AdjacencyGraph) -> float:
    """Geometric mean of ICAR marginal variances across all nodes.

    Computed per connected component under that component's sum-to-zero
    constraint; isolated nodes contribute a variance of one.
    """
    if not graph.nodes:
        raise ValueError("empty graph")
    lap = graph.laplacian()
    log_vars = np.zeros(len(graph.nodes))
    for comp in graph.components():
        idx = np.array(comp)
        if len(idx) > 1:
            block = lap[idx][:, idx]
            v = _icar_marginal_variances(block)
            log_vars[idx] = np.log(v)
    return float(np.exp(log_vars.mean()))


def scaled_structure(graph: AdjacencyGraph) -> ScaledStructure:
    """Rescale the Laplacian per component so marginal variances average to one.

    Multiplying a component block by the geometric mean of its marginal
    variances divides those variances by the same factor, which is the
    rescaling the BYM2 prior requires.
    """
    if not graph.nodes:
        raise ValueError("empty graph")
    n = len(graph.nodes)
    lap = graph.laplacian()
    comps = graph.components()
    factors = []
    log_vars = np.zeros(n)
    node_factor = np.ones(n)
    for comp in comps:
        idx = np.array(comp)
        if len(idx) == 1:
            factors.append(1.0)
            continue
        v = _icar_marginal_variances(lap[idx][:, idx])
        fac = float(np.exp(np.log(v).mean()))
        factors.append(fac)
        log_vars[idx] = np.log(v)
        node_factor[idx] = fac
    # Laplacian entries never cross components, so row-wise scaling rescales
    # each component block by its own factor.
    coo = lap.tocoo()
    precision = sp.csr_matrix(
        (coo.data * node_factor[coo.row], (coo.row, coo.col)), shape=lap.shape
    )
    return ScaledStructure(
        precision=precision,
        scaling_factor=float(np.exp(log_vars.mean())),
        components=comps,
        component_factors=tuple(factors),
    )


def aggregate_populations(pop: PopulationTable, hier: AreaHierarchy) -> PopulationTable:
    """Sum subarea populations to the coarse level, preserving totals."""
    counts = {}
    for (j, group), value in pop.counts.items():
        if j not in hier.subarea_index:
            raise StructuralError(f"population row for unknown subarea {j!r}")
        key = (hier.parent[j], group)
        counts[key] = counts.get(key, 0.0) + value
    return PopulationTable(counts=counts, groups=pop.groups)


def load_subareas(path):
    """Read a subarea table CSV with columns subarea_id, coarse_id."""
    df = pd.read_csv(path, dtype=str)
    _require_columns(df, ["subarea_id", "coarse_id"], path)
    return list(zip(df["subarea_id"], df["coarse_id"]))


def load_adjacency(path):
    """Read an adjacency CSV with columns subarea_a, subarea_b."""
    df = pd.read_csv(path, dtype=str)
    _require_columns(df, ["subarea_a", "subarea_b"], path)
    return list(zip(df["subarea_a"], df["subarea_b"]))


def load_population(path):
    """Read a population CSV with columns subarea_id, group, count."""
    df = pd.read_csv(path, dtype={"subarea_id": str, "group": str})
    _require_columns(df, ["subarea_id", "group", "count"], path)
    records = list(
        zip(df["subarea_id"], df["group"], df["count"].astype(float))
    )
    return PopulationTable.from_records(records)


def _require_columns(df, columns, path):
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
