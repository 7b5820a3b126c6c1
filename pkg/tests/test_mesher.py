import numpy as np
import pytest

from amber.geometry import lshape, make_rng, sample_lshape
from amber.mesh import TriMesh, induced_sizing_field
from amber.mesher import (MesherConfig, MesherError, SizingQuery, eval_sizing, generate,
                          laplacian_smooth, limit_gradation, uniform_initial_mesh)
from conftest import random_mesh, square_grid

def unit_square():
    from amber.geometry import Polygon2
    return Polygon2(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))


def test_eval_sizing_examples():
    assert eval_sizing(SizingQuery.constant(0.1), (0.3, 0.9)) == 0.1
    grid = square_grid(2)
    vals = np.full(grid.n_elements, 0.05)
    vals[3] = 1e-6
    q = SizingQuery.from_field(grid, vals, s_min=0.01, gradation=None)
    assert eval_sizing(q, grid.midpoints[0]) == 0.05
    assert eval_sizing(q, grid.midpoints[3]) == 0.01


def test_sizing_query_validation():
    with pytest.raises(ValueError):
        SizingQuery.constant(0.0)
    grid = square_grid(1)
    with pytest.raises(ValueError):
        SizingQuery.from_field(grid, [np.inf, 1.0], s_min=0.1)
    with pytest.raises(ValueError):
        SizingQuery.from_field(grid, [1.0], s_min=0.1)


def test_unit_square_constant_half():
    mesh = generate(unit_square(), SizingQuery.constant(0.5))
    assert 4 <= mesh.n_elements <= 32
    assert mesh.min_angles().min() >= 20.0
    mesh.check()


def test_halving_size_quadruples_count():
    dom = lshape((0.6, 0.7))
    counts = [generate(dom, SizingQuery.constant(h)).n_elements for h in (0.1, 0.05, 0.025)]
    for a, b in zip(counts, counts[1:]):
        assert 4 / 1.5 <= b / a <= 4 * 1.5


def test_uniform_initial_mesh_coarse():
    mesh = uniform_initial_mesh(lshape((0.5, 0.5)), 0.3)
    assert mesh.n_elements < 100
    f = induced_sizing_field(mesh).values
    assert np.all((f >= 0.3 / 3) & (f <= 0.3 * 3))
    again = uniform_initial_mesh(lshape((0.5, 0.5)), 0.3)
    np.testing.assert_array_equal(again.vertices, mesh.vertices)
    np.testing.assert_array_equal(again.triangles, mesh.triangles)


def _hausdorff_boundary(mesh: TriMesh, poly) -> float:
    """Largest distance from boundary-edge sample points to the polygon boundary and back."""
    from amber.geometry import point_segment_distance
    be = mesh.boundary_edges
    pts = np.concatenate([mesh.vertices[be[:, 0]], 0.5 * (mesh.vertices[be[:, 0]] + mesh.vertices[be[:, 1]])])
    worst = 0.0
    for p in pts:
        worst = max(worst, min(point_segment_distance(p, a, b) for a, b in poly.edges))
    for v in poly.vertices:
        d = np.linalg.norm(mesh.vertices[be[:, 0]] - v, axis=1).min()
        worst = max(worst, d)
    return worst


def test_boundary_preserved_and_area_exact():
    rng = make_rng(11)
    for _ in range(5):
        dom = sample_lshape(rng)
        mesh = generate(dom, SizingQuery.constant(float(rng.uniform(0.03, 0.2))))
        assert _hausdorff_boundary(mesh, dom) <= 1e-10
        assert mesh.volumes.sum() == pytest.approx(dom.area, abs=1e-12)


def test_idempotence_band():
    rng = make_rng(12)
    for _ in range(5):
        dom = sample_lshape(rng)
        carrier = uniform_initial_mesh(dom, 0.15)
        field = np.exp(rng.uniform(np.log(0.01), np.log(0.1), size=carrier.n_elements))
        mesh = generate(dom, SizingQuery.from_field(carrier, field, 0.01))
        again = generate(dom, SizingQuery.from_field(mesh, induced_sizing_field(mesh).values, 1e-3))
        assert abs(again.n_elements - mesh.n_elements) < 0.3 * mesh.n_elements


def test_gradation_envelope():
    grid = square_grid(6)
    vals = np.full(grid.n_elements, 1.0)
    vals[0] = 0.01
    lim = limit_gradation(grid, vals, 0.5)
    assert np.all(lim <= vals)
    adj = grid.adjacency
    d = np.linalg.norm(grid.midpoints[adj[:, 0]] - grid.midpoints[adj[:, 1]], axis=1)
    assert np.all(np.abs(lim[adj[:, 0]] - lim[adj[:, 1]]) <= 0.5 * d + 1e-12)
    assert lim[0] == 0.01


def test_element_cap_raises():
    with pytest.raises(MesherError):
        generate(lshape((0.5, 0.5)), SizingQuery.constant(0.01), MesherConfig(max_elements=100))


def test_rejects_self_intersecting_domain():
    from amber.geometry import Polygon2
    bow = Polygon2(np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]))
    with pytest.raises(MesherError):
        generate(bow, SizingQuery.constant(0.2))


def test_smoothing_examples(rng):
    tri = TriMesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])
    out = laplacian_smooth(tri, 5)
    np.testing.assert_array_equal(out.vertices, tri.vertices)
    # a centred interior vertex of a symmetric star is a fixed point
    v = [[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]]
    star = TriMesh(v, [[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    np.testing.assert_allclose(laplacian_smooth(star, 3).vertices, star.vertices, atol=1e-12)
    mesh = random_mesh(rng)
    jittered = mesh.vertices.copy()
    interior = ~mesh.boundary_vertex
    jittered[interior] += rng.normal(0, 0.01, size=(interior.sum(), 2))
    smoothed = laplacian_smooth(TriMesh(jittered, mesh.triangles), 10)
    if np.all(TriMesh(jittered, mesh.triangles).volumes > 0):
        assert smoothed.volumes.min() > 0
    np.testing.assert_array_equal(smoothed.vertices[~interior], mesh.vertices[~interior])


def test_piecewise_sizing_quality():
    rng = make_rng(13)
    dom = sample_lshape(rng)
    carrier = uniform_initial_mesh(dom, 0.2)
    field = np.exp(rng.uniform(np.log(0.02), np.log(0.15), size=carrier.n_elements))
    q = SizingQuery.from_field(carrier, field, 0.02)
    mesh = generate(dom, q)
    mesh.check()
    assert np.mean(mesh.min_angles() >= 20.0) >= 0.98
    ratio = induced_sizing_field(mesh).values / q(mesh.midpoints)
    assert np.mean((ratio >= 1 / 3) & (ratio <= 3)) >= 0.98
