"""Mesh-to-graph encoding and streaming feature normalization."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from amber.geometry import GmmLoad, eval_load
from amber.mesh import TriMesh

NORM_EPS = 1e-8


@dataclass(frozen=True)
class MeshGraph:
    """Element graph: one node per triangle, directed edges both ways per adjacency."""

    node_features: np.ndarray  # (n, F_v)
    edge_features: np.ndarray  # (E, 1)
    senders: np.ndarray  # (E,)
    receivers: np.ndarray  # (E,)
    geometry_id: str = ""
    depth: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.node_features)

    @property
    def n_edges(self) -> int:
        return len(self.senders)

    def permuted(self, perm: np.ndarray) -> MeshGraph:
        """Graph with node ``i`` moved to position ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return replace(self, node_features=self.node_features[inv],
                       senders=perm[self.senders], receivers=perm[self.receivers])


def build_graph(mesh: TriMesh, load: GmmLoad | None = None, solution: np.ndarray | None = None,
                geometry_id: str = "", depth: int = 0) -> MeshGraph:
    if solution is not None and load is None:
        raise ValueError("solution features require the load")
    volume = mesh.volumes
    if load is None:
        x = volume[:, None].copy()
    else:
        if solution is None:
            raise ValueError("load features require the discrete solution")
        solution = np.asarray(solution, dtype=float)
        if solution.shape != (mesh.n_vertices,):
            raise ValueError(f"solution has {solution.shape} entries, expected {mesh.n_vertices}")
        at_vertices = solution[mesh.triangles]
        x = np.column_stack([
            volume,
            eval_load(load, mesh.midpoints),
            at_vertices.mean(axis=1),
            at_vertices.std(axis=1),
        ])
    adj = mesh.adjacency
    senders = np.concatenate([adj[:, 0], adj[:, 1]])
    receivers = np.concatenate([adj[:, 1], adj[:, 0]])
    mid = mesh.midpoints
    dist = np.linalg.norm(mid[senders] - mid[receivers], axis=1)
    return MeshGraph(x, dist[:, None], senders, receivers, geometry_id, depth)


@dataclass
class RunningMoments:
    mean: np.ndarray
    m2: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, width: int) -> RunningMoments:
        return cls(np.zeros(width), np.zeros(width), 0)

    @property
    def variance(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self.mean)
        return self.m2 / self.count

    def update(self, x: np.ndarray) -> None:
        """Merge a block of samples (Chan et al. pairwise update)."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != len(self.mean):
            raise ValueError("feature width mismatch")
        n_b = len(x)
        if n_b == 0:
            return
        mean_b = x.mean(axis=0)
        m2_b = ((x - mean_b) ** 2).sum(axis=0)
        n_a = self.count
        n = n_a + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + delta ** 2 * (n_a * n_b / n)
        self.count = n

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "m2": self.m2.tolist(), "count": self.count}

    @classmethod
    def from_json(cls, obj) -> RunningMoments:
        return cls(np.array(obj["mean"], dtype=float), np.array(obj["m2"], dtype=float),
                   int(obj["count"]))


@dataclass
class FeatureStats:
    node: RunningMoments
    edge: RunningMoments = field(default_factory=lambda: RunningMoments.empty(1))

    @classmethod
    def empty(cls, node_width: int, edge_width: int = 1) -> FeatureStats:
        return cls(RunningMoments.empty(node_width), RunningMoments.empty(edge_width))

    @property
    def count(self) -> int:
        return self.node.count

    def copy(self) -> FeatureStats:
        return FeatureStats(RunningMoments(self.node.mean.copy(), self.node.m2.copy(), self.node.count),
                            RunningMoments(self.edge.mean.copy(), self.edge.m2.copy(), self.edge.count))

    def to_json(self) -> dict:
        return {"node": self.node.to_json(), "edge": self.edge.to_json()}

    @classmethod
    def from_json(cls, obj) -> FeatureStats:
        return cls(RunningMoments.from_json(obj["node"]), RunningMoments.from_json(obj["edge"]))


def update_stats(stats: FeatureStats, graph: MeshGraph) -> FeatureStats:
    """Return a copy of ``stats`` with the graph's node and edge features merged in."""
    if graph.node_features.shape[1] != len(stats.node.mean):
        raise ValueError("node feature width does not match the statistics")
    if graph.edge_features.shape[1] != len(stats.edge.mean):
        raise ValueError("edge feature width does not match the statistics")
    out = stats.copy()
    out.node.update(graph.node_features)
    out.edge.update(graph.edge_features)
    return out


def normalize(graph: MeshGraph, stats: FeatureStats) -> MeshGraph:
    if stats.node.count < 2:
        raise ValueError("need statistics from at least two samples")
    x = (graph.node_features - stats.node.mean) / np.sqrt(stats.node.variance + NORM_EPS)
    e = graph.edge_features
    if stats.edge.count > 0:
        e = (e - stats.edge.mean) / np.sqrt(stats.edge.variance + NORM_EPS)
    return replace(graph, node_features=x, edge_features=e)
