import numpy as np
import pytest

from amber.fem import rgb_refine
from amber.geometry import make_rng
from amber.mesh import (TriMesh, barycentric, induced_sizing_field, sizing_from_volume,
                        volume_from_sizing)
from amber.projection import Aggregator, label_statistics, project_expert_sizing
from conftest import random_mesh, square_grid


def brute_force_labels(inter: TriMesh, expert: TriMesh, agg: str) -> np.ndarray:
    """O(n*m) containment scan with the lowest-index and nearest-centroid rules."""
    f = sizing_from_volume(expert.volumes)
    groups = [[] for _ in range(inter.n_elements)]
    for j, p in enumerate(expert.midpoints):
        lam = barycentric(inter.corners, np.broadcast_to(p, (inter.n_elements, 2)))
        inside = np.nonzero(np.all(lam >= -1e-12, axis=1))[0]
        if len(inside):
            owner = inside[0]
        else:
            owner = int(np.argmin(np.linalg.norm(inter.midpoints - p, axis=1)))
        groups[owner].append(f[j])
    out = np.empty(inter.n_elements)
    for i, vals in enumerate(groups):
        if vals:
            out[i] = np.mean(vals) if agg == "mean" else np.max(vals)
        else:
            c = inter.midpoints[i]
            lam = barycentric(expert.corners, np.broadcast_to(c, (expert.n_elements, 2)))
            inside = np.nonzero(np.all(lam >= -1e-12, axis=1))[0]
            src = inside[0] if len(inside) else int(np.argmin(np.linalg.norm(expert.midpoints - c, axis=1)))
            out[i] = f[src]
    return out


@pytest.mark.parametrize("agg", ["mean", "max"])
def test_identity_projection(agg, rng):
    mesh = random_mesh(rng)
    np.testing.assert_array_equal(project_expert_sizing(mesh, mesh, agg).values,
                                  induced_sizing_field(mesh).values)


def test_one_coarse_element_four_children():
    coarse = TriMesh([[0, 0], [40, 0], [0, 40]], [[0, 1, 2]])
    verts, tris = [], []
    for k, f in enumerate([1.0, 2.0, 3.0, 4.0]):
        leg = np.sqrt(2 * volume_from_sizing(f))
        x0 = 1.0 + 5.0 * k
        verts += [[x0, 1.0], [x0 + leg, 1.0], [x0, 1.0 + leg]]
        tris.append([3 * k, 3 * k + 1, 3 * k + 2])
    expert = TriMesh(verts, tris)
    np.testing.assert_allclose(induced_sizing_field(expert).values, [1, 2, 3, 4], rtol=1e-14)
    assert project_expert_sizing(coarse, expert, "mean").values[0] == pytest.approx(2.5, abs=1e-12)
    assert project_expert_sizing(coarse, expert, "max").values[0] == pytest.approx(4.0, abs=1e-12)


def test_matches_brute_force():
    rng = make_rng(31)
    for _ in range(5):
        inter = random_mesh(rng, (0.1, 0.3))
        expert = random_mesh(rng, (0.05, 0.15))
        for agg in ("mean", "max"):
            np.testing.assert_allclose(project_expert_sizing(inter, expert, agg).values,
                                       brute_force_labels(inter, expert, agg), rtol=0, atol=1e-12)


def test_max_dominates_mean_and_permutation_invariance(rng):
    inter = random_mesh(rng, (0.2, 0.3))
    expert = random_mesh(rng, (0.04, 0.08))
    mean = project_expert_sizing(inter, expert, Aggregator.MEAN).values
    mx = project_expert_sizing(inter, expert, Aggregator.MAX).values
    assert np.all(mx >= mean)
    perm = rng.permutation(expert.n_elements)
    shuffled = TriMesh(expert.vertices, expert.triangles[perm])
    np.testing.assert_allclose(project_expert_sizing(inter, shuffled, "mean").values, mean,
                               rtol=1e-12)
    np.testing.assert_array_equal(project_expert_sizing(inter, shuffled, "max").values, mx)


def test_nested_refinement_mean_not_coarser():
    grid = square_grid(3)
    fine = rgb_refine(rgb_refine(grid, range(grid.n_elements)), [0, 1, 2, 3])
    labels = project_expert_sizing(grid, fine, "mean").values
    assert np.all(labels <= induced_sizing_field(grid).values + 1e-12)


def test_empty_elements_fall_back():
    fine_expert = square_grid(1)
    inter = square_grid(4)
    labels = project_expert_sizing(inter, fine_expert, "mean").values
    assert np.all(labels > 0)
    np.testing.assert_allclose(labels, induced_sizing_field(fine_expert).values[0], rtol=1e-14)


def test_label_statistics():
    assert label_statistics([1.0, 2.0, 3.0]) == (1.0, 3.0, 2.0)
    assert label_statistics([0.7] * 4) == (0.7, 0.7, pytest.approx(0.7))
    assert label_statistics([5.0]) == (5.0, 5.0, 5.0)
    with pytest.raises(ValueError):
        label_statistics([])
