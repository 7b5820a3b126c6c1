"""Problem instances, expert dataset generation and the JSON manifest."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from amber.fem import PRESETS, ExpertConfig, expert_heuristic
from amber.geometry import GmmLoad, Polygon2, sample_gmm_load, sample_lshape
from amber.mesh import TriMesh, induced_sizing_field, load_tmesh
from amber.mesher import MesherConfig

log = logging.getLogger(__name__)

SPLITS = ("train", "eval", "test")

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "seed", "config", "instances"],
    "properties": {
        "version": {"const": 1},
        "seed": {"type": "integer", "minimum": 0},
        "config": {"type": "object"},
        "instances": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "split", "geometry", "load", "expert"],
                "properties": {
                    "id": {"type": "string"},
                    "split": {"enum": list(SPLITS)},
                    "geometry": {
                        "type": "object",
                        "required": ["vertices"],
                        "properties": {"vertices": {
                            "type": "array", "minItems": 3,
                            "items": {"type": "array", "items": {"type": "number"},
                                      "minItems": 2, "maxItems": 2}}},
                    },
                    "load": {
                        "type": "object",
                        "required": ["weights", "means", "covariances"],
                        "properties": {
                            "weights": {"type": "array", "items": {"type": "number"}},
                            "means": {"type": "array", "items": {
                                "type": "array", "items": {"type": "number"},
                                "minItems": 2, "maxItems": 2}},
                            "covariances": {"type": "array", "items": {
                                "type": "array", "items": {"type": "number"},
                                "minItems": 4, "maxItems": 4}},
                        },
                    },
                    "expert": {"type": "string"},
                    "n_elements": {"type": "integer", "minimum": 1},
                },
            },
        },
    },
}


@dataclass
class Instance:
    id: str
    domain: Polygon2
    load: GmmLoad
    expert: TriMesh
    split: str = "train"


def instance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _make_instance(args) -> tuple[str, str, dict, dict, str | None, str | None]:
    seed, index, split, expert_cfg, mesher_cfg = args
    rng = instance_rng(seed, index)
    domain = sample_lshape(rng)
    load = sample_gmm_load(rng, domain)
    iid = f"{split}-{index:04d}"
    try:
        mesh = expert_heuristic(domain, load, expert_cfg, mesher_cfg)
    except Exception as exc:  # recorded per instance; the dataset continues
        return iid, split, domain.to_json(), load.to_json(), None, f"{type(exc).__name__}: {exc}"
    return iid, split, domain.to_json(), load.to_json(), mesh.to_tmesh(
        {"sizing": induced_sizing_field(mesh).values}), None


def generate_dataset(out_dir, n_train: int, n_eval: int, n_test: int, seed: int = 0,
                     preset: str = "easy", theta: float = 0.5, workers: int = 1,
                     expert_cfg: ExpertConfig | None = None,
                     mesher_cfg: MesherConfig = MesherConfig()) -> Path:
    """Sample instances, run the expert on each and write meshes plus manifest.json.

    Instance ``i`` is drawn from its own seed stream ``(seed, i)`` so results do
    not depend on worker scheduling.
    """
    out = Path(out_dir)
    (out / "experts").mkdir(parents=True, exist_ok=True)
    if expert_cfg is None:
        expert_cfg = ExpertConfig(n_refinements=PRESETS[preset], theta=theta)
    jobs = []
    index = 0
    for split, count in zip(SPLITS, (n_train, n_eval, n_test)):
        for _ in range(count):
            jobs.append((seed, index, split, expert_cfg, mesher_cfg))
            index += 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_make_instance, jobs))
    else:
        results = [_make_instance(j) for j in jobs]
    instances = []
    for iid, split, geom, load, text, err in results:
        if err is not None:
            log.warning("instance %s skipped: %s", iid, err)
            continue
        rel = f"experts/{iid}.tmesh"
        (out / rel).write_text(text)
        n_el = int(text.splitlines()[1].split()[1])
        instances.append({"id": iid, "split": split, "geometry": geom, "load": load,
                          "expert": rel, "n_elements": n_el})
    manifest = {
        "version": 1,
        "seed": int(seed),
        "config": {
            "preset": preset,
            "n_refinements": expert_cfg.n_refinements,
            "theta": expert_cfg.theta,
            "smoothing_iters": expert_cfg.smoothing_iters,
            "h_init": expert_cfg.h_init,
            "counts": {"train": n_train, "eval": n_eval, "test": n_test},
        },
        "instances": instances,
    }
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text())
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    root = path.parent
    for inst in manifest["instances"]:
        if not (root / inst["expert"]).exists():
            raise FileNotFoundError(f"expert mesh missing: {inst['expert']}")
    return manifest


def load_instances(path, split: str | None = None) -> list[Instance]:
    path = Path(path)
    manifest = load_manifest(path)
    out = []
    for inst in manifest["instances"]:
        if split is not None and inst["split"] != split:
            continue
        mesh, _ = load_tmesh(path.parent / inst["expert"])
        out.append(Instance(inst["id"], Polygon2.from_json(inst["geometry"]),
                            GmmLoad.from_json(inst["load"]), mesh, inst["split"]))
    return out
