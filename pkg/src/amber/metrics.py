"""Mesh similarity: density-aware Chamfer distance and volume difference."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from amber.geometry import Polygon2
from amber.mesh import TriMesh, induced_sizing_field, locate_or_nearest, nearest_points
from amber.mesher import MesherConfig, SizingQuery, generate

log = logging.getLogger(__name__)


def _points(p) -> np.ndarray:
    p = np.asarray(p.midpoints if isinstance(p, TriMesh) else p, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) == 0:
        raise ValueError("need a non-empty (n, 2) point set")
    return p


def _one_way(a: np.ndarray, b: np.ndarray) -> float:
    idx = nearest_points(cKDTree(b), b, a)
    dist = np.linalg.norm(a - b[idx], axis=1)
    counts = np.bincount(idx, minlength=len(b))
    return float(np.mean(1.0 - np.exp(-dist) / counts[idx]))


def dcd(a, b) -> float:
    """Symmetric density-aware Chamfer distance between point sets (or mesh midpoints).

    Each point is matched to its nearest neighbour in the other set (lowest
    index on ties) and scores 1 - exp(-d) / n, where n is the number of points
    of its own set matched to the same target.
    """
    a = _points(a)
    b = _points(b)
    return 0.5 * (_one_way(a, b) + _one_way(b, a))


def normalized_dcd(m_t, m_star, m_0, m_hat) -> float:
    d0 = dcd(m_0, m_star)
    den = dcd(m_hat, m_star) - d0
    if abs(den) <= 1e-12:
        raise ValueError("normalization is degenerate: initial mesh is as close as the reconstruction")
    return (dcd(m_t, m_star) - d0) / den


def reconstruction(expert: TriMesh, domain: Polygon2, cfg: MesherConfig = MesherConfig()) -> TriMesh:
    """Mesh generated from the expert's own induced sizing field."""
    f = induced_sizing_field(expert).values
    return generate(domain, SizingQuery.from_field(expert, f, float(f.min()), cfg.gradation), cfg)


def volume_difference(a: TriMesh, b: TriMesh) -> float:
    """Sum over both meshes of |own volume - volume of the other mesh's element at the midpoint|."""
    if a.n_elements == 0 or b.n_elements == 0:
        raise ValueError("empty mesh")
    j = locate_or_nearest(b, a.midpoints)
    i = locate_or_nearest(a, b.midpoints)
    return float(np.abs(a.volumes - b.volumes[j]).sum() + np.abs(b.volumes - a.volumes[i]).sum())


# -- evaluation ----------------------------------------------------------------------------

STEP_METRICS = ("dcd", "vol_diff", "n_elements")


@dataclass
class EvalReport:
    geometries: list[dict]
    aggregate: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"geometries": self.geometries, "aggregate": self.aggregate, "notes": self.notes}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, obj) -> EvalReport:
        return cls(obj["geometries"], obj.get("aggregate", {}), obj.get("notes", {}))

    @classmethod
    def loads(cls, text: str) -> EvalReport:
        return cls.from_json(json.loads(text))


def aggregate(geometries: list[dict], steps: int) -> dict:
    """Mean and quartiles across geometries, per step for step metrics.

    Geometries that failed or stopped before ``steps`` are left out of the
    per-step statistics they do not cover.
    """
    ok = [g for g in geometries if "error" not in g]
    out = {"mean": {}, "q25": {}, "q75": {}, "count": {}}
    for m in STEP_METRICS:
        for key in out:
            out[key][m] = []
        for t in range(steps + 1):
            vals = [g["steps"][t][m] for g in ok if len(g["steps"]) > t]
            out["count"][m].append(len(vals))
            for key, fn in (("mean", np.mean), ("q25", lambda v: np.quantile(v, 0.25)),
                            ("q75", lambda v: np.quantile(v, 0.75))):
                out[key][m].append(float(fn(vals)) if vals else None)
    vals = [g["ndcd_final"] for g in ok if g.get("ndcd_final") is not None]
    out["count"]["ndcd_final"] = len(vals)
    out["mean"]["ndcd_final"] = float(np.mean(vals)) if vals else None
    out["q25"]["ndcd_final"] = float(np.quantile(vals, 0.25)) if vals else None
    out["q75"]["ndcd_final"] = float(np.quantile(vals, 0.75)) if vals else None
    return out


def evaluate_meshes(gid: str, meshes: list[TriMesh], expert: TriMesh, domain: Polygon2,
                    mesher_cfg: MesherConfig = MesherConfig(), truncated: bool = False) -> dict:
    """Per-step raw DCD and volume difference against the expert, plus final normalized DCD."""
    rec = {"id": gid, "truncated": bool(truncated), "steps": []}
    for t, m in enumerate(meshes):
        rec["steps"].append({"t": t, "n_elements": m.n_elements, "dcd": dcd(m, expert),
                             "vol_diff": volume_difference(m, expert)})
    try:
        m_hat = reconstruction(expert, domain, mesher_cfg)
        rec["ndcd_final"] = normalized_dcd(meshes[-1], expert, meshes[0], m_hat)
        rec["dcd_reconstruction"] = dcd(m_hat, expert)
    except Exception as exc:  # the anchors can be degenerate or unmeshable
        rec["ndcd_final"] = None
        rec["ndcd_error"] = f"{type(exc).__name__}: {exc}"
    return rec


def _evaluate_one(args) -> dict:
    from amber.trainer import infer
    ckpt, inst, steps, mesher_cfg, max_elements = args
    try:
        res = infer(ckpt, inst.domain, inst.load, steps, mesher_cfg, max_elements)
        return evaluate_meshes(inst.id, res.meshes, inst.expert, inst.domain,
                               mesher_cfg or MesherConfig(), res.truncated)
    except Exception as exc:
        log.warning("evaluation of %s failed: %s", inst.id, exc)
        return {"id": inst.id, "error": f"{type(exc).__name__}: {exc}", "steps": []}


def evaluate(ckpt, instances, steps: int, mesher_cfg: MesherConfig | None = None,
             max_elements: int | None = None, workers: int = 1) -> EvalReport:
    """Run inference on every instance and score each generation step against its expert."""
    from amber.mpn import load_checkpoint
    instances = list(instances)
    if not instances:
        raise ValueError("no instances to evaluate")
    if not hasattr(ckpt, "params"):
        ckpt = load_checkpoint(ckpt)
    jobs = [(ckpt, inst, steps, mesher_cfg, max_elements) for inst in instances]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            recs = list(pool.map(_evaluate_one, jobs))
    else:
        recs = [_evaluate_one(j) for j in jobs]
    recs.sort(key=lambda r: r["id"])
    return EvalReport(recs, aggregate(recs, steps))
