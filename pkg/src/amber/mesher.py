"""Sizing-field-driven triangle mesh generation."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from amber import _cdt
from amber.geometry import Polygon2
from amber.mesh import MIN_AREA, ElementField, MeshError, TriMesh, locate_or_nearest


class MesherError(RuntimeError):
    pass


@dataclass(frozen=True)
class MesherConfig:
    min_angle: float = 20.0
    # largest allowed slope of the target size along the carrier mesh
    gradation: float = 0.15
    smoothing_iters: int = 3
    max_elements: int = 200_000
    # longest-edge / target-size ratio that triggers refinement
    size_factor: float = 2.2

    def __post_init__(self):
        if not 0 < self.min_angle <= 28:
            raise ValueError("min_angle must lie in (0, 28] degrees")
        if self.gradation <= 0:
            raise ValueError("gradation must be positive")
        if self.max_elements < 1:
            raise ValueError("max_elements must be positive")


class SizingQuery:
    """Target size, either constant or piecewise constant on a carrier mesh.

    The carrier values are floored at ``s_min`` and limited to grow by at most
    ``gradation`` per unit distance between neighbouring carrier elements.
    """

    def __init__(self, h=None, carrier: TriMesh | None = None, field=None,
                 s_min: float | None = None, gradation: float | None = None):
        if h is not None:
            if carrier is not None or field is not None:
                raise ValueError("give either a constant size or a carrier field")
            if not h > 0:
                raise ValueError("constant size must be positive")
            self.h = float(h)
            self.carrier = None
            self.values = None
            self.raw = None
            self.s_min = float(h) if s_min is None else float(s_min)
            return
        if carrier is None or field is None or s_min is None:
            raise ValueError("carrier sizing needs a mesh, a field and s_min")
        if not s_min > 0:
            raise ValueError("s_min must be positive")
        vals = np.asarray(field.values if isinstance(field, ElementField) else field,
                          dtype=float)
        if vals.shape != (carrier.n_elements,) or not np.all(np.isfinite(vals)):
            raise ValueError("carrier field must hold one finite value per element")
        self.h = None
        self.carrier = carrier
        self.s_min = float(s_min)
        self.raw = np.maximum(vals, self.s_min)
        self.gradation = gradation
        self.values = self.raw if gradation is None else limit_gradation(
            carrier, self.raw, gradation)

    @classmethod
    def constant(cls, h: float) -> SizingQuery:
        return cls(h=h)

    @classmethod
    def from_field(cls, carrier: TriMesh, field, s_min: float,
                   gradation: float | None = MesherConfig.gradation) -> SizingQuery:
        return cls(carrier=carrier, field=field, s_min=s_min, gradation=gradation)

    def with_gradation(self, gradation: float) -> SizingQuery:
        if self.h is not None or self.gradation == gradation:
            return self
        return SizingQuery(carrier=self.carrier, field=self.raw, s_min=self.s_min,
                           gradation=gradation)

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if self.h is not None:
            return np.full(len(pts), self.h)
        return self.values[locate_or_nearest(self.carrier, pts)]


def limit_gradation(carrier: TriMesh, values: np.ndarray, slope: float) -> np.ndarray:
    """Lower envelope v_i = min_j (v_j + slope * d(i, j)) over the element graph."""
    out = np.array(values, dtype=float)
    adj = carrier.adjacency
    if len(adj) == 0:
        return out
    mid = carrier.midpoints
    dist = np.linalg.norm(mid[adj[:, 0]] - mid[adj[:, 1]], axis=1) * slope
    n = carrier.n_elements
    nbrs = [[] for _ in range(n)]
    for (i, j), d in zip(adj.tolist(), dist.tolist()):
        nbrs[i].append((j, d))
        nbrs[j].append((i, d))
    best = out.tolist()
    heap = [(v, i) for i, v in enumerate(best)]
    heapq.heapify(heap)
    while heap:
        v, i = heapq.heappop(heap)
        if v > best[i]:
            continue
        for j, d in nbrs[i]:
            cand = v + d
            if cand < best[j]:
                best[j] = cand
                heapq.heappush(heap, (cand, j))
    return np.array(best)


def eval_sizing(q: SizingQuery, p) -> float:
    return float(q(np.asarray(p, dtype=float).reshape(1, 2))[0])


def generate(domain: Polygon2, q: SizingQuery, cfg: MesherConfig = MesherConfig()) -> TriMesh:
    """Quality triangle mesh of ``domain`` following the sizing query."""
    if domain.area <= 0 or not domain.is_simple():
        raise MesherError("domain must be a simple counter-clockwise polygon")
    q = q.with_gradation(cfg.gradation)
    refiner = _cdt.Refiner(domain.vertices, q, min_angle=cfg.min_angle,
                           size_factor=cfg.size_factor, max_elements=cfg.max_elements)
    try:
        refiner.run()
    except _cdt.RefinementError as exc:
        raise MesherError(str(exc)) from exc
    pts, tris = refiner.result()
    mesh = TriMesh(pts, tris)
    if cfg.smoothing_iters:
        mesh = laplacian_smooth(mesh, cfg.smoothing_iters, min_angle=cfg.min_angle)
    try:
        mesh.check()
    except MeshError as exc:
        raise MesherError(f"generated mesh is invalid: {exc}") from exc
    return mesh


def uniform_initial_mesh(domain: Polygon2, h0: float, cfg: MesherConfig = MesherConfig()) -> TriMesh:
    if not h0 > 0:
        raise ValueError("h0 must be positive")
    return generate(domain, SizingQuery.constant(h0), cfg)


def _angles_ok(corners: np.ndarray, min_angle: float) -> np.ndarray:
    a = np.linalg.norm(corners[:, 2] - corners[:, 1], axis=1)
    b = np.linalg.norm(corners[:, 0] - corners[:, 2], axis=1)
    c = np.linalg.norm(corners[:, 1] - corners[:, 0], axis=1)
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    lmin = np.minimum(np.minimum(a, b), c)
    # sin of the smallest angle = 2 * area / (product of the two longer edges)
    with np.errstate(divide="ignore", invalid="ignore"):
        sin_min = 2.0 * area * lmin / (a * b * c)
    return sin_min >= math.sin(math.radians(min_angle)) - 1e-12


def laplacian_smooth(mesh: TriMesh, iters: int, damping: float = 0.5,
                     min_angle: float | None = None) -> TriMesh:
    """Damped Jacobi smoothing of interior vertices.

    A vertex keeps its old position for an iteration if moving would invert
    an incident triangle, or, with ``min_angle`` set, push an incident
    triangle below that angle when it was not already below it.
    """
    if iters <= 0 or mesh.n_elements == 0:
        return mesh
    tris = mesh.triangles
    interior = ~mesh.boundary_vertex
    if not np.any(interior):
        return mesh
    edges = mesh.edges
    nv = mesh.n_vertices
    deg = np.bincount(edges.reshape(-1), minlength=nv).astype(float)
    pos = mesh.vertices.copy()
    for _ in range(iters):
        acc = np.zeros_like(pos)
        np.add.at(acc, edges[:, 0], pos[edges[:, 1]])
        np.add.at(acc, edges[:, 1], pos[edges[:, 0]])
        avg = acc / np.maximum(deg, 1.0)[:, None]
        target = pos + damping * (avg - pos)
        move = interior.copy()
        if min_angle is not None:
            was_ok = _angles_ok(pos[tris], min_angle)
        for _guard in range(nv + 1):
            cand = np.where(move[:, None], target, pos)
            c = cand[tris]
            e1 = c[:, 1] - c[:, 0]
            e2 = c[:, 2] - c[:, 0]
            area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
            bad = area <= MIN_AREA
            if min_angle is not None:
                bad |= was_ok & ~_angles_ok(c, min_angle)
            bad &= np.any(move[tris], axis=1)
            if not np.any(bad):
                break
            move[tris[bad].reshape(-1)] = False
        pos = np.where(move[:, None], target, pos)
    return TriMesh(pos, tris, mesh.boundary_vertex)
