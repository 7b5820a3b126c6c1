"""Depth-stratified replay buffer of generated intermediate meshes."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from amber.fem import SolverError, solve_poisson
from amber.graph import FeatureStats, MeshGraph, build_graph, normalize, update_stats
from amber.mesh import ElementField, TriMesh, induced_sizing_field
from amber.mesher import MesherConfig, MesherError, SizingQuery, generate, uniform_initial_mesh
from amber.mpn import MpnParams, forward
from amber.projection import Aggregator, project_expert_sizing

log = logging.getLogger(__name__)


@dataclass(eq=False)
class BufferEntry:
    graph: MeshGraph  # unnormalized features
    labels: ElementField
    depth: int
    mesh: TriMesh
    geometry_id: str
    use_count: int = 0

    def __post_init__(self):
        if len(self.labels.values) != self.graph.n_nodes:
            raise ValueError("labels and graph disagree on the node count")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")


@dataclass(frozen=True)
class BufferConfig:
    max_depth: int = 5
    max_size: int = 1000
    element_cap_ratio: float = 1.2
    node_budget: int = 400_000
    add_frequency: int = 8

    def __post_init__(self):
        if min(self.max_depth, self.max_size, self.node_budget, self.add_frequency) <= 0:
            raise ValueError("buffer settings must be positive")
        if not self.element_cap_ratio > 0:
            raise ValueError("element_cap_ratio must be positive")


def make_features(mesh: TriMesh, load, features: str, geometry_id: str, depth: int) -> MeshGraph:
    if features == "poisson":
        return build_graph(mesh, load, solve_poisson(mesh, load), geometry_id, depth)
    if features == "geometry":
        return build_graph(mesh, geometry_id=geometry_id, depth=depth)
    raise ValueError(f"unknown feature mode {features!r}")


def node_width(features: str) -> int:
    return {"poisson": 4, "geometry": 1}[features]


def predict_sizing(params: MpnParams, stats: FeatureStats, graph: MeshGraph,
                   s_min: float) -> np.ndarray:
    """Eval-mode prediction clipped below at ``s_min``."""
    pred, _ = forward(params, normalize(graph, stats), keep=False)
    return np.maximum(pred, s_min)


class ReplayBuffer:
    """Training meshes grouped by the number of generation steps behind them.

    ``instances`` maps geometry ids to objects with ``domain``, ``load`` and
    ``expert`` attributes.  Depth-0 entries are the fixed coarse initial
    meshes and are never evicted.
    """

    def __init__(self, instances: dict, cfg: BufferConfig, agg: Aggregator | str,
                 s_min: float, mesher_cfg: MesherConfig = MesherConfig(),
                 features: str = "poisson"):
        self.instances = instances
        self.cfg = cfg
        self.agg = Aggregator(agg)
        self.s_min = float(s_min)
        self.mesher_cfg = mesher_cfg
        self.features = features
        self.entries: list[BufferEntry] = []
        self.stats = FeatureStats.empty(node_width(features))
        largest = max(inst.expert.n_elements for inst in instances.values())
        # a mesh larger than a whole batch would be trained on alone, unbounded in memory
        self.element_cap = min(int(math.floor(cfg.element_cap_ratio * largest)), cfg.node_budget)

    def __len__(self):
        return len(self.entries)

    def make_entry(self, gid: str, mesh: TriMesh, depth: int) -> BufferEntry:
        inst = self.instances[gid]
        graph = make_features(mesh, inst.load, self.features, gid, depth)
        labels = project_expert_sizing(mesh, inst.expert, self.agg)
        # long-lived entries keep only the core arrays; caches are rebuilt on demand
        return BufferEntry(graph, labels, depth, mesh.bare(), gid)

    def insert(self, entry: BufferEntry) -> None:
        if entry.depth > self.cfg.max_depth:
            raise ValueError("entry deeper than max_depth")
        self.entries.append(entry)
        self.stats = update_stats(self.stats, entry.graph)
        if len(self.entries) > self.cfg.max_size:
            self._evict()

    def _evict(self) -> None:
        depths = self.depths()
        counts = np.bincount(depths[depths > 0], minlength=self.cfg.max_depth + 1)
        if counts.sum() == 0:
            raise RuntimeError("buffer is full of depth-0 entries; raise max_size")
        stratum = int(np.argmax(counts))
        cands = [i for i, e in enumerate(self.entries) if e.depth == stratum]
        # highest use count; the oldest among equals
        victim = max(cands, key=lambda i: (self.entries[i].use_count, -i))
        del self.entries[victim]

    def depths(self) -> np.ndarray:
        return np.array([e.depth for e in self.entries], dtype=np.int64)

    def occupancy(self) -> list[int]:
        return np.bincount(self.depths(), minlength=self.cfg.max_depth + 1).tolist()

    def dump(self, out_dir) -> None:
        """Write every entry as ``.tmesh`` (with its labels) plus an index.json."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        index = []
        for i, e in enumerate(self.entries):
            name = f"entry{i:05d}.tmesh"
            e.mesh.save(out / name, {"labels": e.labels.values})
            index.append({"file": name, "depth": e.depth, "geometry_id": e.geometry_id,
                          "use_count": e.use_count, "n_elements": e.mesh.n_elements})
        (out / "index.json").write_text(json.dumps(index, indent=1))


def init_buffer(instances, h0: float, agg: Aggregator | str, cfg: BufferConfig = BufferConfig(),
                s_min: float | None = None, mesher_cfg: MesherConfig = MesherConfig(),
                features: str = "poisson") -> ReplayBuffer:
    """One depth-0 entry per training instance, built on a uniform mesh of size ``h0``."""
    instances = list(instances)
    if not instances:
        raise ValueError("need at least one training instance")
    by_id = {inst.id: inst for inst in instances}
    if len(by_id) != len(instances):
        raise ValueError("duplicate instance ids")
    if s_min is None:
        s_min = min_expert_sizing(instances)
    buf = ReplayBuffer(by_id, cfg, agg, s_min, mesher_cfg, features)
    for inst in instances:
        mesh = uniform_initial_mesh(inst.domain, h0, mesher_cfg)
        buf.insert(buf.make_entry(inst.id, mesh, 0))
    return buf


def min_expert_sizing(instances) -> float:
    return float(min(induced_sizing_field(i.expert).values.min() for i in instances))


def max_expert_sizing(instances) -> float:
    return float(max(induced_sizing_field(i.expert).values.max() for i in instances))


def add_stratified(buf: ReplayBuffer, params: MpnParams, rng: np.random.Generator) -> dict:
    """Refine one stored mesh by a generation step and store the result one level deeper.

    Returns an event record describing what happened.
    """
    depths = buf.depths()
    present = np.unique(depths[depths < buf.cfg.max_depth])
    if len(present) == 0:
        return {"event": "add", "status": "skipped", "reason": "no eligible stratum"}
    d = int(present[rng.integers(len(present))])
    cands = np.nonzero(depths == d)[0]
    src = buf.entries[int(cands[rng.integers(len(cands))])]
    inst = buf.instances[src.geometry_id]
    record = {"event": "add", "geometry_id": src.geometry_id, "from_depth": d}
    pred = predict_sizing(params, buf.stats, src.graph, buf.s_min)
    q = SizingQuery.from_field(src.mesh.bare(), pred, buf.s_min, buf.mesher_cfg.gradation)
    mcfg = replace(buf.mesher_cfg, max_elements=max(1, buf.element_cap))
    try:
        mesh = generate(inst.domain, q, mcfg)
        entry = buf.make_entry(src.geometry_id, mesh, d + 1)
    except MesherError as exc:
        msg = str(exc)
        status = "rejected" if "element cap" in msg else "failed"
        if status == "failed":
            log.warning("buffer addition failed: %s", msg)
        return {**record, "status": status, "reason": msg}
    except SolverError as exc:
        log.warning("buffer addition failed: %s", exc)
        return {**record, "status": "failed", "reason": str(exc)}
    buf.insert(entry)
    return {**record, "status": "added", "n_elements": mesh.n_elements}


def sample_batch(buf: ReplayBuffer, node_budget: int, rng: np.random.Generator) -> list[BufferEntry]:
    """Least-used entries first (random among equal counts) until the node budget is hit."""
    if not buf.entries:
        raise ValueError("buffer is empty")
    uses = np.array([e.use_count for e in buf.entries])
    order = np.lexsort((rng.random(len(uses)), uses))
    batch = []
    total = 0
    for i in order:
        e = buf.entries[int(i)]
        n = e.graph.n_nodes
        if batch and total + n > node_budget:
            break
        batch.append(e)
        total += n
    for e in batch:
        e.use_count += 1
    return batch
