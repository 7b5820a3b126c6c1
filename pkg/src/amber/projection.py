"""Expert sizing-field labels projected onto intermediate meshes."""

from __future__ import annotations

import enum

import numpy as np

from amber.mesh import ElementField, TriMesh, locate_or_nearest, sizing_from_volume


class Aggregator(str, enum.Enum):
    MEAN = "mean"
    MAX = "max"


def project_expert_sizing(inter: TriMesh, expert: TriMesh, agg: Aggregator | str) -> ElementField:
    """Target size per intermediate element.

    Each expert element is assigned to the intermediate element containing its
    midpoint (nearest centroid when the midpoint falls outside), and assigned
    sizes are combined with ``agg``.  Elements that receive nothing take the
    size of the expert element containing (or nearest to) their own centroid.
    """
    agg = Aggregator(agg)
    if expert.n_elements == 0:
        raise ValueError("expert mesh is empty")
    f_exp = sizing_from_volume(expert.volumes)
    owner = locate_or_nearest(inter, expert.midpoints)
    n = inter.n_elements
    counts = np.bincount(owner, minlength=n)
    if agg is Aggregator.MEAN:
        sums = np.bincount(owner, weights=f_exp, minlength=n)
        labels = np.divide(sums, counts, out=np.zeros(n), where=counts > 0)
    else:
        labels = np.full(n, -np.inf)
        np.maximum.at(labels, owner, f_exp)
    empty = counts == 0
    if np.any(empty):
        src = locate_or_nearest(expert, inter.midpoints[empty])
        labels[empty] = f_exp[src]
    return ElementField.on(inter, labels)


def label_statistics(field) -> tuple[float, float, float]:
    values = np.asarray(getattr(field, "values", field), dtype=float)
    if len(values) == 0:
        raise ValueError("empty field")
    return float(values.min()), float(values.max()), float(values.mean())
