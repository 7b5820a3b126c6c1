"""Triangle meshes, element fields, adjacency and point location."""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

DIM = 2
MIN_AREA = 1e-14
BARY_TOL = 1e-12
# d! / sqrt(d + 1) for d = 2
_SIZING_CONST = math.factorial(DIM) / math.sqrt(DIM + 1)


class MeshError(ValueError):
    pass


class TriMesh:
    """Immutable 2D triangle mesh.

    Parameters
    ----------
    vertices : (nv, 2) array_like
    triangles : (nt, 3) array_like of int
        Counter-clockwise vertex indices, 0-based.
    boundary_vertex : (nv,) bool array, optional
        Derived from the topology (vertices on edges with a single incident
        triangle) when omitted.
    """

    def __init__(self, vertices, triangles, boundary_vertex=None):
        v = np.array(vertices, dtype=float).reshape(-1, 2)
        t = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        v.setflags(write=False)
        t.setflags(write=False)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle vertex index out of range")
        self.vertices = v
        self.triangles = t
        if boundary_vertex is None:
            flags = np.zeros(len(v), dtype=bool)
            flags[self.boundary_edges.reshape(-1)] = True
        else:
            flags = np.array(boundary_vertex, dtype=bool)
            if flags.shape != (len(v),):
                raise MeshError("boundary flag count differs from vertex count")
        flags.setflags(write=False)
        self.boundary_vertex = flags

    def __repr__(self):
        return f"TriMesh(nv={self.n_vertices}, nt={self.n_elements})"

    def bare(self) -> TriMesh:
        """Copy sharing the core arrays but none of the cached geometry."""
        out = object.__new__(TriMesh)
        out.vertices, out.triangles = self.vertices, self.triangles
        out.boundary_vertex = self.boundary_vertex
        return out

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    def __len__(self):
        return self.n_elements

    @cached_property
    def uid(self) -> str:
        h = hashlib.sha1()
        h.update(self.vertices.tobytes())
        h.update(self.triangles.tobytes())
        return h.hexdigest()[:16]

    # -- geometry ---------------------------------------------------------
    @cached_property
    def corners(self) -> np.ndarray:
        """(nt, 3, 2) vertex coordinates per triangle."""
        return self.vertices[self.triangles]

    @cached_property
    def volumes(self) -> np.ndarray:
        c = self.corners
        e1 = c[:, 1] - c[:, 0]
        e2 = c[:, 2] - c[:, 0]
        out = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        out.setflags(write=False)
        return out

    @cached_property
    def midpoints(self) -> np.ndarray:
        out = self.corners.mean(axis=1)
        out.setflags(write=False)
        return out

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        """(nt, 3) lengths; column k is the edge opposite local vertex k."""
        c = self.corners
        out = np.stack([
            np.linalg.norm(c[:, 2] - c[:, 1], axis=1),
            np.linalg.norm(c[:, 0] - c[:, 2], axis=1),
            np.linalg.norm(c[:, 1] - c[:, 0], axis=1),
        ], axis=1)
        return out

    def min_angles(self) -> np.ndarray:
        """Smallest interior angle of each triangle, in degrees."""
        ln = self.edge_lengths
        a, b, c = ln[:, 0], ln[:, 1], ln[:, 2]
        cos_a = np.clip((b * b + c * c - a * a) / (2 * b * c), -1.0, 1.0)
        cos_b = np.clip((a * a + c * c - b * b) / (2 * a * c), -1.0, 1.0)
        cos_c = np.clip((a * a + b * b - c * c) / (2 * a * b), -1.0, 1.0)
        ang = np.degrees(np.arccos(np.stack([cos_a, cos_b, cos_c], axis=1)))
        return ang.min(axis=1)

    # -- topology ---------------------------------------------------------
    @cached_property
    def _edge_table(self):
        """Unique undirected edges, and per-triangle local edge -> unique edge id."""
        t = self.triangles
        local = np.stack([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]], axis=1)  # (nt, 3, 2)
        flat = np.sort(local.reshape(-1, 2), axis=1)
        uniq, inverse, counts = np.unique(flat, axis=0, return_inverse=True, return_counts=True)
        return uniq, inverse.reshape(-1, 3), counts

    @property
    def edges(self) -> np.ndarray:
        return self._edge_table[0]

    @property
    def element_edges(self) -> np.ndarray:
        """(nt, 3) unique-edge id of the edge opposite each local vertex."""
        return self._edge_table[1]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        uniq, _, counts = self._edge_table
        return uniq[counts == 1]

    @cached_property
    def edge_elements(self) -> np.ndarray:
        """(ne, 2) incident elements per unique edge; -1 marks a missing side."""
        uniq, inv, counts = self._edge_table
        if np.any(counts > 2):
            raise MeshError("non-manifold edge: more than two incident triangles")
        out = -np.ones((len(uniq), 2), dtype=np.int64)
        flat = inv.reshape(-1)
        elem = np.repeat(np.arange(self.n_elements), 3)
        order = np.argsort(flat, kind="stable")
        fs, es = flat[order], elem[order]
        first = np.ones(len(fs), dtype=bool)
        first[1:] = fs[1:] != fs[:-1]
        out[fs[first], 0] = es[first]
        out[fs[~first], 1] = es[~first]
        return out

    @cached_property
    def adjacency(self) -> np.ndarray:
        """(m, 2) element pairs i < j sharing a full edge, lexicographically sorted."""
        ee = self.edge_elements
        pairs = ee[ee[:, 1] >= 0]
        pairs = np.sort(pairs, axis=1)
        if len(pairs) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        return pairs[order]

    @cached_property
    def neighbors(self) -> np.ndarray:
        """(nt, 3) element across the edge opposite local vertex k, or -1."""
        ee = self.edge_elements
        eid = self.element_edges
        pair = ee[eid]  # (nt, 3, 2)
        me = np.arange(self.n_elements)[:, None]
        return np.where(pair[:, :, 0] == me, pair[:, :, 1], pair[:, :, 0])

    @cached_property
    def vertex_neighbors(self) -> list[np.ndarray]:
        """Sorted one-ring vertex indices per vertex."""
        e = self.edges
        both = np.concatenate([e, e[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        splits = np.searchsorted(both[:, 0], np.arange(self.n_vertices + 1))
        return [both[splits[i]:splits[i + 1], 1] for i in range(self.n_vertices)]

    # -- validation ---------------------------------------------------------
    def check(self) -> None:
        """Raise MeshError unless every structural invariant holds."""
        t = self.triangles
        if self.n_elements == 0:
            raise MeshError("mesh has no triangles")
        if t.min() < 0 or t.max() >= self.n_vertices:
            raise MeshError("triangle vertex index out of range")
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise MeshError("triangle with repeated vertex")
        if np.any(self.volumes <= MIN_AREA):
            raise MeshError("degenerate or clockwise triangle")
        _, _, counts = self._edge_table
        if np.any(counts > 2):
            raise MeshError("non-manifold edge")
        # each interior edge must be used once in each direction
        directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        if len(np.unique(directed, axis=0)) != len(directed):
            raise MeshError("inconsistently oriented neighbours")
        # hanging nodes show up as vertices in the interior of boundary edges
        be = self.boundary_edges
        if len(be):
            a = self.vertices[be[:, 0]]
            b = self.vertices[be[:, 1]]
            used = np.unique(t)
            pts = self.vertices[used]
            tree = cKDTree(pts)
            mids = 0.5 * (a + b)
            half = 0.5 * np.linalg.norm(b - a, axis=1)
            for k, cand in enumerate(tree.query_ball_point(mids, half * (1 + 1e-9))):
                for c in cand:
                    vid = used[c]
                    if vid in (be[k, 0], be[k, 1]):
                        continue
                    p = pts[c]
                    ab = b[k] - a[k]
                    cross = ab[0] * (p[1] - a[k][1]) - ab[1] * (p[0] - a[k][0])
                    if abs(cross) <= 1e-10 * float(ab @ ab):
                        s = float((p - a[k]) @ ab) / float(ab @ ab)
                        if 0.0 < s < 1.0:
                            raise MeshError("hanging node on edge")

    # -- serialization -------------------------------------------------------
    def to_tmesh(self, fields: dict[str, np.ndarray] | None = None) -> str:
        fields = fields or {}
        buf = io.StringIO()
        buf.write(f"tmesh {DIM}\n")
        buf.write(f"{self.n_vertices} {self.n_elements} {len(fields)}\n")
        for x, y in self.vertices:
            buf.write(f"{_fmt(x)} {_fmt(y)}\n")
        for i, j, k in self.triangles:
            buf.write(f"{i} {j} {k}\n")
        for name, values in fields.items():
            values = np.asarray(values, dtype=float)
            if values.shape != (self.n_elements,):
                raise MeshError(f"field {name!r} has wrong length")
            buf.write(f"field {name}\n")
            for v in values:
                buf.write(f"{_fmt(v)}\n")
        return buf.getvalue()

    def save(self, path, fields=None) -> None:
        Path(path).write_text(self.to_tmesh(fields))


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def parse_tmesh(text: str) -> tuple[TriMesh, dict[str, np.ndarray]]:
    lines = text.splitlines()
    try:
        head = lines[0].split()
        if head != ["tmesh", str(DIM)]:
            raise MeshError("bad tmesh header")
        nv, nt, nf = (int(s) for s in lines[1].split())
        pos = 2
        verts = np.array([[float(s) for s in lines[pos + i].split()] for i in range(nv)])
        pos += nv
        tris = np.array([[int(s) for s in lines[pos + i].split()] for i in range(nt)],
                        dtype=np.int64)
        pos += nt
        fields = {}
        for _ in range(nf):
            tag, name = lines[pos].split(maxsplit=1)
            if tag != "field":
                raise MeshError("expected field block")
            pos += 1
            fields[name] = np.array([float(lines[pos + i]) for i in range(nt)])
            pos += nt
    except (IndexError, ValueError) as exc:
        raise MeshError(f"malformed tmesh data: {exc}") from exc
    return TriMesh(verts.reshape(-1, 2), tris.reshape(-1, 3)), fields


def load_tmesh(path) -> tuple[TriMesh, dict[str, np.ndarray]]:
    return parse_tmesh(Path(path).read_text())


@dataclass(frozen=True)
class ElementField:
    """One finite scalar per element of the mesh tagged by ``mesh_id``."""

    values: np.ndarray
    mesh_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("element field values must be finite")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    @classmethod
    def on(cls, mesh: TriMesh, values) -> ElementField:
        values = np.asarray(values, dtype=float)
        if values.shape != (mesh.n_elements,):
            raise ValueError("field length differs from element count")
        return cls(values, mesh.uid)


# -- per-element quantities -------------------------------------------------

def element_volume(mesh: TriMesh, i: int) -> float:
    return float(mesh.volumes[i])


def element_midpoint(mesh: TriMesh, i: int) -> np.ndarray:
    return mesh.midpoints[i].copy()


def sizing_from_volume(volume):
    """Sizing value of a simplex with the given volume."""
    return (np.asarray(volume) * _SIZING_CONST) ** (1.0 / DIM)


def volume_from_sizing(h):
    return np.asarray(h) ** DIM / _SIZING_CONST


def sizing_of_element(mesh: TriMesh, i: int) -> float:
    return float(sizing_from_volume(mesh.volumes[i]))


def induced_sizing_field(mesh: TriMesh) -> ElementField:
    return ElementField.on(mesh, sizing_from_volume(mesh.volumes))


def adjacency(mesh: TriMesh) -> np.ndarray:
    return mesh.adjacency


# -- point location ------------------------------------------------------------

class PointLocator:
    """Uniform background grid over triangle bounding boxes."""

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        c = mesh.corners
        lo = c.min(axis=1)
        hi = c.max(axis=1)
        self.origin = lo.min(axis=0)
        extent = np.maximum(hi.max(axis=0) - self.origin, 1e-12)
        n = max(1, int(math.ceil(math.sqrt(mesh.n_elements))))
        self.shape = np.maximum(1, np.ceil(n * extent / extent.max()).astype(np.int64))
        self.cell = extent / self.shape
        ilo = self._cell_index(lo - BARY_TOL)
        ihi = self._cell_index(hi + BARY_TOL)
        spans_x = ihi[:, 0] - ilo[:, 0] + 1
        spans_y = ihi[:, 1] - ilo[:, 1] + 1
        counts = spans_x * spans_y
        tri_ids = np.repeat(np.arange(mesh.n_elements), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        sx = np.repeat(spans_x, counts)
        cx = np.repeat(ilo[:, 0], counts) + offs % sx
        cy = np.repeat(ilo[:, 1], counts) + offs // sx
        cell_ids = cx * self.shape[1] + cy
        order = np.lexsort((tri_ids, cell_ids))
        self._tris = tri_ids[order]
        self._start = np.searchsorted(cell_ids[order], np.arange(self.shape.prod() + 1))
        self._tree = None

    def _cell_index(self, pts):
        idx = np.floor((pts - self.origin) / self.cell).astype(np.int64)
        return np.clip(idx, 0, self.shape - 1)

    def locate(self, points) -> np.ndarray:
        """Lowest-index element containing each point (closed triangles), -1 if none."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        out = -np.ones(len(pts), dtype=np.int64)
        if len(pts) == 0:
            return out
        lo = self.origin - BARY_TOL
        hi = self.origin + self.cell * self.shape + BARY_TOL
        inside_box = np.all((pts >= lo) & (pts <= hi), axis=1)
        idx = self._cell_index(pts)
        cell = idx[:, 0] * self.shape[1] + idx[:, 1]
        start = self._start[cell]
        count = np.where(inside_box, self._start[cell + 1] - start, 0)
        pid = np.repeat(np.arange(len(pts)), count)
        offs = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
        cand = self._tris[np.repeat(start, count) + offs]
        ok = barycentric_inside(self.mesh.corners[cand], pts[pid])
        pid, cand = pid[ok], cand[ok]
        # candidates come sorted by element index within each cell
        first = np.ones(len(pid), dtype=bool)
        if len(pid):
            order = np.lexsort((cand, pid))
            pid, cand = pid[order], cand[order]
            first[1:] = pid[1:] != pid[:-1]
        out[pid[first]] = cand[first]
        return out

    def nearest(self, points) -> np.ndarray:
        """Element with the closest centroid; ties go to the lowest index."""
        if self._tree is None:
            self._tree = cKDTree(self.mesh.midpoints)
        return nearest_points(self._tree, self.mesh.midpoints, points)


def nearest_points(tree: cKDTree, data: np.ndarray, points) -> np.ndarray:
    """Index of the closest row of ``data`` per query point, lowest index on ties."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(data)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    k = min(8, n)
    _, idx = tree.query(pts, k=k)
    idx = np.asarray(idx).reshape(len(pts), k)
    diff = data[idx] - pts[:, None, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    best = dist.min(axis=1)
    tie_idx = np.where(dist == best[:, None], idx, np.iinfo(np.int64).max)
    out = tie_idx.min(axis=1)
    # all k candidates tied: there may be more beyond k
    crowded = np.nonzero((dist[:, -1] == best) & (k < n))[0]
    for q in crowded:
        cand = np.array(tree.query_ball_point(pts[q], best[q] * (1 + 1e-9) + 1e-300))
        d = np.sqrt(((data[cand] - pts[q]) ** 2).sum(axis=1))
        out[q] = cand[d == d.min()].min()
    return out.astype(np.int64)


def barycentric_inside(tri: np.ndarray, pts: np.ndarray, tol: float = BARY_TOL) -> np.ndarray:
    """Closed-triangle test via barycentric coordinates >= -tol."""
    lam = barycentric(tri, pts)
    return np.all(lam >= -tol, axis=1)


def barycentric(tri: np.ndarray, pts: np.ndarray) -> np.ndarray:
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    v0 = b - a
    v1 = c - a
    v2 = pts - a
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / det
    l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=1)


def locator(mesh: TriMesh) -> PointLocator:
    loc = mesh.__dict__.get("_locator")
    if loc is None:
        loc = PointLocator(mesh)
        mesh.__dict__["_locator"] = loc
    return loc


def locate(mesh: TriMesh, p) -> int | None:
    idx = int(locator(mesh).locate(p)[0])
    return None if idx < 0 else idx


def nearest_element(mesh: TriMesh, p) -> int:
    if mesh.n_elements == 0:
        raise MeshError("empty mesh")
    return int(locator(mesh).nearest(p)[0])


def locate_or_nearest(mesh: TriMesh, points) -> np.ndarray:
    """Containing element per point, falling back to the nearest centroid."""
    loc = locator(mesh)
    idx = loc.locate(points)
    miss = idx < 0
    if np.any(miss):
        idx[miss] = loc.nearest(np.asarray(points, dtype=float).reshape(-1, 2)[miss])
    return idx
