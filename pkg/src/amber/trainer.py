"""Training loop with replay-buffer data collection, and iterative inference."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from amber.buffer import (BufferConfig, ReplayBuffer, add_stratified, init_buffer, make_features,
                          max_expert_sizing, min_expert_sizing, node_width, predict_sizing,
                          sample_batch)
from amber.fem import SolverError
from amber.geometry import GmmLoad, Polygon2
from amber.graph import normalize
from amber.mesh import ElementField, TriMesh
from amber.mesher import MesherConfig, MesherError, SizingQuery, generate, uniform_initial_mesh
from amber.mpn import (AdamState, Checkpoint, MpnConfig, adam_step, backward, batch_graphs,
                       forward, init_params, load_checkpoint, save_checkpoint)
from amber.projection import Aggregator

log = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    training_steps: int = 128_000
    add_frequency: int = 8
    node_budget: int = 400_000
    loss: str = "mse"
    aggregator: str = "mean"
    inference_steps: int = 5
    # None: largest expert sizing value over the training set
    h0: float | None = None
    seed: int = 0
    checkpoint_every: int = 0
    lr: float = 3e-4
    latent: int = 64
    mp_steps: int = 10
    edge_dropout: float = 0.1
    norm_placement: str = "post"
    max_depth: int = 5
    max_size: int = 1000
    element_cap_ratio: float = 1.2
    features: str = "poisson"
    # arithmetic of forward/backward passes; weights and moments stay float64
    compute_dtype: str = "float64"
    mesher: MesherConfig = field(default_factory=MesherConfig)

    def __post_init__(self):
        if self.training_steps < 0:
            raise ValueError("training_steps must be non-negative")
        if self.add_frequency <= 0 or self.node_budget <= 0:
            raise ValueError("add_frequency and node_budget must be positive")
        if self.inference_steps < 1:
            raise ValueError("inference_steps must be at least 1")
        if self.loss not in ("mse", "log_mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        Aggregator(self.aggregator)
        if self.compute_dtype not in DTYPES:
            raise ValueError(f"unknown compute dtype {self.compute_dtype!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["mesher"] = asdict(self.mesher)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> TrainConfig:
        obj = dict(obj)
        if "mesher" in obj:
            obj["mesher"] = MesherConfig(**obj["mesher"])
        return cls(**obj)


PRESETS = {
    "paper": dict(training_steps=128_000, node_budget=400_000),
    "desk": dict(training_steps=2_000, node_budget=20_000, compute_dtype="float32"),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    buffer: ReplayBuffer
    log: list[dict]


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "batch", "dropout", "buffer")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(s)) for n, s in zip(names, seqs)}


def _extra(cfg: TrainConfig, s_min: float, h0: float, buf: ReplayBuffer, step: int) -> dict:
    return {"s_min": s_min, "h0": h0, "features": cfg.features, "aggregator": cfg.aggregator,
            "inference_steps": cfg.inference_steps, "element_cap": buf.element_cap,
            "train_config": cfg.to_json(), "step": step}


def train(instances, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Imitation training on the replay buffer.

    Writes ``train_log.jsonl``, ``checkpoint.ambr`` and any periodic
    checkpoints to ``out_dir`` when one is given.
    """
    instances = list(instances)
    if not instances:
        raise ValueError("need at least one training instance")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rngs = _streams(cfg.seed)
    dtype = DTYPES[cfg.compute_dtype]
    s_min = min_expert_sizing(instances)
    h0 = cfg.h0 if cfg.h0 is not None else max_expert_sizing(instances)
    bcfg = BufferConfig(cfg.max_depth, cfg.max_size, cfg.element_cap_ratio, cfg.node_budget,
                        cfg.add_frequency)
    buf = init_buffer(instances, h0, cfg.aggregator, bcfg, s_min, cfg.mesher, cfg.features)
    mcfg = MpnConfig(node_width(cfg.features), 1, cfg.latent, cfg.mp_steps,
                     edge_dropout=cfg.edge_dropout, norm_placement=cfg.norm_placement)
    params = init_params(rngs["init"], mcfg)
    adam = AdamState.for_params(params, cfg.lr)
    records: list[dict] = []
    log_file = open(out / "train_log.jsonl", "w") if out is not None else None

    def emit(rec):
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")

    try:
        for step in range(1, cfg.training_steps + 1):
            batch = sample_batch(buf, cfg.node_budget, rngs["batch"])
            graph = batch_graphs([normalize(e.graph, buf.stats) for e in batch])
            labels = np.concatenate([e.labels.values for e in batch])
            _, cache = forward(params, graph, train=True, rng=rngs["dropout"], dtype=dtype)
            loss, grads = backward(params, cache, labels, cfg.loss)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                _abort(out, step, loss, batch, params)
            adam_step(params, adam, grads)
            emit({"step": step, "loss": loss, "n_nodes": graph.n_nodes,
                  "occupancy": buf.occupancy()})
            if step % cfg.add_frequency == 0:
                ev = add_stratified(buf, params, rngs["buffer"])
                emit({"step": step, **ev, "occupancy": buf.occupancy()})
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{step:07d}.ambr", params, adam, buf.stats,
                                _extra(cfg, s_min, h0, buf, step))
    finally:
        if log_file is not None:
            log_file.close()
    extra = _extra(cfg, s_min, h0, buf, cfg.training_steps)
    if out is not None:
        save_checkpoint(out / "checkpoint.ambr", params, adam, buf.stats, extra)
    ckpt = Checkpoint(params, adam, buf.stats.copy(), extra)
    return TrainResult(ckpt, buf, records)


def _abort(out, step, loss, batch, params):
    info = {
        "step": step,
        "loss": repr(loss),
        "batch": [{"geometry_id": e.geometry_id, "depth": e.depth, "n_nodes": e.graph.n_nodes}
                  for e in batch],
        "param_norms": {k: float(np.linalg.norm(v)) for k, v in params.arrays.items()},
    }
    if out is not None:
        (out / "abort_dump.json").write_text(json.dumps(info, indent=1))
    raise TrainingError(f"non-finite loss at step {step}: {info['loss']}")


@dataclass
class InferenceResult:
    meshes: list[TriMesh]
    # predicted sizing on each mesh; sizing[t] generated meshes[t + 1]
    sizing: list[ElementField]
    truncated: bool = False
    reason: str = ""


def infer(ckpt: Checkpoint | str | Path, domain: Polygon2, load: GmmLoad | None, steps: int,
          mesher_cfg: MesherConfig | None = None, max_elements: int | None = None
          ) -> InferenceResult:
    """Iterated generation M^0 -> M^1 -> ... -> M^steps with the frozen model."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if steps < 0:
        raise ValueError("steps must be non-negative")
    extra = ckpt.extra
    s_min = float(extra["s_min"])
    features = extra.get("features", "poisson")
    if mesher_cfg is None:
        tc = extra.get("train_config")
        mesher_cfg = MesherConfig(**tc["mesher"]) if tc else MesherConfig()
    if max_elements is not None:
        mesher_cfg = replace(mesher_cfg, max_elements=max_elements)
    mesh = uniform_initial_mesh(domain, float(extra["h0"]), mesher_cfg)
    res = InferenceResult([mesh], [])
    for t in range(steps + 1):
        try:
            graph = make_features(mesh, load, features, "", t)
            pred = predict_sizing(ckpt.params, ckpt.stats, graph, s_min)
            res.sizing.append(ElementField.on(mesh, pred))
            if t == steps:
                break
            q = SizingQuery.from_field(mesh, pred, s_min, mesher_cfg.gradation)
            mesh = generate(domain, q, mesher_cfg)
        except (MesherError, SolverError) as exc:
            res.truncated = True
            res.reason = str(exc)
            log.warning("inference stopped after %d steps: %s", t, exc)
            break
        res.meshes.append(mesh)
    return res
