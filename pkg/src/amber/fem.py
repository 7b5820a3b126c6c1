"""P1 Poisson solver and the adaptive-refinement expert that produces training meshes."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from amber.geometry import GmmLoad, Polygon2, eval_load
from amber.mesh import ElementField, TriMesh
from amber.mesher import MesherConfig, laplacian_smooth, uniform_initial_mesh

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


@dataclass
class SparseSystem:
    """Poisson system with Dirichlet rows eliminated.

    ``stiffness`` and ``load`` are the full assembled operators; ``matrix``
    and ``rhs`` are restricted to ``free`` vertex indices.
    """

    stiffness: sp.csr_matrix
    load: np.ndarray
    free: np.ndarray
    matrix: sp.csr_matrix
    rhs: np.ndarray
    n_vertices: int


@dataclass(frozen=True)
class ExpertConfig:
    n_refinements: int = 25
    theta: float = 0.5
    smoothing_iters: int = 2
    # element size of the coarse mesh the refinement starts from
    h_init: float = 0.3

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        if self.n_refinements < 0:
            raise ValueError("n_refinements must be non-negative")


PRESETS = {"easy": 25, "medium": 50, "hard": 75}


def basis_gradients(mesh: TriMesh) -> np.ndarray:
    """(nt, 3, 2) gradients of the three P1 hat functions per triangle."""
    c = mesh.corners
    area2 = 2.0 * mesh.volumes
    # gradient of phi_k is the inward normal of the opposite edge over 2A
    g = np.empty((mesh.n_elements, 3, 2))
    for k in range(3):
        p1 = c[:, (k + 1) % 3]
        p2 = c[:, (k + 2) % 3]
        e = p2 - p1
        g[:, k, 0] = -e[:, 1] / area2
        g[:, k, 1] = e[:, 0] / area2
    return g


def assemble_stiffness(mesh: TriMesh) -> sp.csr_matrix:
    g = basis_gradients(mesh)
    ke = np.einsum("eid,ejd->eij", g, g) * mesh.volumes[:, None, None]
    rows = np.repeat(mesh.triangles, 3, axis=1).reshape(-1)
    cols = np.tile(mesh.triangles, (1, 3)).reshape(-1)
    n = mesh.n_vertices
    return sp.csr_matrix((ke.reshape(-1), (rows, cols)), shape=(n, n))


def assemble_load(mesh: TriMesh, f_values: np.ndarray) -> np.ndarray:
    """One-point centroid quadrature of f against each hat function."""
    b = np.zeros(mesh.n_vertices)
    contrib = np.repeat((f_values * mesh.volumes / 3.0)[:, None], 3, axis=1)
    np.add.at(b, mesh.triangles.reshape(-1), contrib.reshape(-1))
    return b


def assemble_poisson(mesh: TriMesh, load: GmmLoad | None = None,
                     f_values: np.ndarray | None = None) -> SparseSystem:
    """Assemble -Δu = f with u = 0 on the boundary.

    The right-hand side comes from ``load`` evaluated at element centroids,
    or from precomputed per-element ``f_values``.
    """
    # with no interior vertices the system is empty and the solution is zero
    free = np.nonzero(~mesh.boundary_vertex)[0]
    if f_values is None:
        if load is None:
            raise ValueError("need a load or per-element load values")
        f_values = eval_load(load, mesh.midpoints)
    k = assemble_stiffness(mesh)
    b = assemble_load(mesh, np.asarray(f_values, dtype=float))
    a = k[free][:, free].tocsr()
    return SparseSystem(k, b, free, a, b[free], mesh.n_vertices)


def solve_cg(system: SparseSystem, tol: float = 1e-10) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients; returns the full nodal vector."""
    a = system.matrix
    b = system.rhs
    n = len(b)
    u = np.zeros(system.n_vertices)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return u
    inv_diag = 1.0 / a.diagonal()
    x = np.zeros(n)
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    for _ in range(10 * n):
        ap = a @ p
        alpha = rz / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= tol * bnorm:
            u[system.free] = x
            return u
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"conjugate gradients did not converge within {10 * n} iterations")


def solve_poisson(mesh: TriMesh, load: GmmLoad, tol: float = 1e-10) -> np.ndarray:
    return solve_cg(assemble_poisson(mesh, load), tol)


def element_gradients(mesh: TriMesh, u: np.ndarray) -> np.ndarray:
    g = basis_gradients(mesh)
    return np.einsum("ek,ekd->ed", u[mesh.triangles], g)


def error_estimate(mesh: TriMesh, u: np.ndarray, load: GmmLoad | None = None,
                   f_values: np.ndarray | None = None) -> ElementField:
    """Residual heuristic h^2 |f|^2 + h |[grad u . n]|^2 per element.

    h is the longest element edge, |f|^2 uses centroid quadrature, and the
    jump term sums edge length times the squared normal-gradient jump over
    the element's interior edges.
    """
    if f_values is None:
        f_values = eval_load(load, mesh.midpoints)
    h = mesh.edge_lengths.max(axis=1)
    volume_term = h ** 2 * f_values ** 2 * mesh.volumes
    grads = element_gradients(mesh, u)
    ee = mesh.edge_elements
    interior = ee[:, 1] >= 0
    e = mesh.edges[interior]
    i, j = ee[interior, 0], ee[interior, 1]
    tangent = mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]]
    length = np.linalg.norm(tangent, axis=1)
    normal = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / length[:, None]
    jump = np.einsum("ed,ed->e", grads[i] - grads[j], normal)
    edge_term = length * jump ** 2
    jumps = np.zeros(mesh.n_elements)
    np.add.at(jumps, i, edge_term)
    np.add.at(jumps, j, edge_term)
    return ElementField.on(mesh, volume_term + h * jumps)


def mark(err, theta: float) -> np.ndarray:
    """Sorted indices with err > theta * max(err); the argmax is always included."""
    values = np.asarray(getattr(err, "values", err), dtype=float)
    if len(values) == 0:
        raise ValueError("cannot mark an empty field")
    top = values.max()
    marked = values > theta * top
    marked[int(np.argmax(values))] = True
    return np.nonzero(marked)[0]


def _reference_edges(mesh: TriMesh) -> np.ndarray:
    """Local index (opposite vertex) of each element's longest edge.

    Ties are broken by global edge id so neighbours agree on shared edges.
    """
    ln = mesh.edge_lengths
    eid = mesh.element_edges
    is_long = ln >= ln.max(axis=1, keepdims=True) * (1 - 1e-12)
    masked = np.where(is_long, eid, np.iinfo(np.int64).max)
    return np.argmin(masked, axis=1)


def rgb_refine(mesh: TriMesh, marked) -> TriMesh:
    """Conforming red-green-blue refinement.

    Marked elements are split red. Every element with a split edge also has
    its longest edge split, so the closure consists of red (3 split edges),
    blue (2) and green (1) patterns.
    """
    marked = np.asarray(sorted(set(int(m) for m in marked)), dtype=np.int64)
    if len(marked) == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_elements:
        raise IndexError("marked element index out of range")
    eid = mesh.element_edges
    n_edges = len(mesh.edges)
    split = np.zeros(n_edges, dtype=bool)
    split[eid[marked].reshape(-1)] = True
    ref_local = _reference_edges(mesh)
    ref = eid[np.arange(mesh.n_elements), ref_local]
    while True:
        touched = split[eid].any(axis=1)
        need = touched & ~split[ref]
        if not need.any():
            break
        split[ref[need]] = True
    mid_id = -np.ones(n_edges, dtype=np.int64)
    mid_id[split] = mesh.n_vertices + np.arange(split.sum())
    e = mesh.edges[split]
    new_pts = 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])
    verts = np.vstack([mesh.vertices, new_pts])

    out = []
    tris = mesh.triangles
    for t in range(mesh.n_elements):
        v = tris[t]
        m = mid_id[eid[t]]  # midpoint of edge opposite local vertex k
        n_split = int((m >= 0).sum())
        if n_split == 0:
            out.append(v)
        elif n_split == 3:
            out.extend([
                (v[0], m[2], m[1]),
                (v[1], m[0], m[2]),
                (v[2], m[1], m[0]),
                (m[0], m[1], m[2]),
            ])
        else:
            k = ref_local[t]
            a, b, c = v[k], v[(k + 1) % 3], v[(k + 2) % 3]
            mr = m[k]
            if n_split == 1:
                out.extend([(a, b, mr), (a, mr, c)])
            else:
                q = m[(k + 2) % 3]  # edge (a, b)
                r = m[(k + 1) % 3]  # edge (c, a)
                if q >= 0:
                    out.extend([(a, q, mr), (q, b, mr), (a, mr, c)])
                else:
                    out.extend([(a, b, mr), (a, mr, r), (mr, c, r)])
    return TriMesh(verts, np.array(out, dtype=np.int64))


def expert_heuristic(domain: Polygon2, load: GmmLoad, cfg: ExpertConfig = ExpertConfig(),
                     mesher_cfg: MesherConfig = MesherConfig(), history: list | None = None) -> TriMesh:
    """Solve-estimate-mark-refine loop starting from a uniform coarse mesh."""
    h = cfg.h_init
    mesh = uniform_initial_mesh(domain, h, mesher_cfg)
    # thin domains may need a finer start to have any free vertex
    while mesh.boundary_vertex.all():
        h *= 0.5
        mesh = uniform_initial_mesh(domain, h, mesher_cfg)
    if history is not None:
        history.append(mesh)
    for _ in range(cfg.n_refinements):
        f_vals = eval_load(load, mesh.midpoints)
        u = solve_cg(assemble_poisson(mesh, f_values=f_vals))
        err = error_estimate(mesh, u, f_values=f_vals)
        mesh = rgb_refine(mesh, mark(err, cfg.theta))
        mesh = laplacian_smooth(mesh, cfg.smoothing_iters)
        if history is not None:
            history.append(mesh)
    return mesh
