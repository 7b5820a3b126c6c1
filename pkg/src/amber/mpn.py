"""Message-passing network with hand-written backward pass, losses and Adam.

Layout of one message-passing step (post-norm)::

    e' = LN_e(e + MLP_e([v_recv, v_send, e]))
    v' = LN_v(v + MLP_v([v, mean_{incoming} e']))

With ``norm_placement="pre"`` the step instead reads::

    e' = e + MLP_e([LN_v(v)_recv, LN_v(v)_send, LN_e(e)])
    v' = v + MLP_v([LN_v(v), mean_{incoming} e'])

Every MLP has two linear layers with a LeakyReLU in between.  Predictions
are softplus(decoder(v_L)), so they are strictly positive.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from amber import _kernels
from amber.graph import FeatureStats, MeshGraph

LN_EPS = 1e-5
MAGIC = b"AMBR1"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class MpnConfig:
    node_width: int
    edge_width: int = 1
    latent: int = 64
    steps: int = 10
    leaky_slope: float = 0.01
    edge_dropout: float = 0.1
    norm_placement: str = "post"

    def __post_init__(self):
        if self.node_width <= 0 or self.edge_width <= 0 or self.latent <= 0:
            raise ValueError("widths must be positive")
        if self.norm_placement not in ("pre", "post"):
            raise ValueError("norm_placement must be 'pre' or 'post'")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def param_shapes(cfg: MpnConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = cfg.latent
    shapes = [
        ("embed_node.w", (cfg.node_width, d)), ("embed_node.b", (d,)),
        ("embed_edge.w", (cfg.edge_width, d)), ("embed_edge.b", (d,)),
    ]
    for l in range(cfg.steps):
        p = f"step{l}."
        shapes += [
            (p + "edge.w1", (3 * d, d)), (p + "edge.b1", (d,)),
            (p + "edge.w2", (d, d)), (p + "edge.b2", (d,)),
            (p + "edge_norm.g", (d,)), (p + "edge_norm.b", (d,)),
            (p + "node.w1", (2 * d, d)), (p + "node.b1", (d,)),
            (p + "node.w2", (d, d)), (p + "node.b2", (d,)),
            (p + "node_norm.g", (d,)), (p + "node_norm.b", (d,)),
        ]
    shapes += [
        ("decoder.w1", (d, d)), ("decoder.b1", (d,)),
        ("decoder.w2", (d, 1)), ("decoder.b2", (1,)),
    ]
    return shapes


class MpnParams:
    """Named float64 weight arrays in declaration order."""

    def __init__(self, cfg: MpnConfig, arrays: dict[str, np.ndarray]):
        expected = param_shapes(cfg)
        if [k for k, _ in expected] != list(arrays):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected:
            if arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {arrays[name].shape}, expected {shape}")
        self.cfg = cfg
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        self.version = 0

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self) -> MpnParams:
        return MpnParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def init_params(rng: np.random.Generator, cfg: MpnConfig) -> MpnParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    arrays = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".g"):
            arrays[name] = np.ones(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
    return MpnParams(cfg, arrays)


# -- graph batching ---------------------------------------------------------------

def batch_graphs(graphs: list[MeshGraph]) -> MeshGraph:
    """Disjoint union of graphs with node indices offset per graph."""
    if len(graphs) == 1:
        return graphs[0]
    offsets = np.cumsum([0] + [g.n_nodes for g in graphs[:-1]])
    return MeshGraph(
        np.concatenate([g.node_features for g in graphs]),
        np.concatenate([g.edge_features for g in graphs]),
        np.concatenate([g.senders + o for g, o in zip(graphs, offsets)]),
        np.concatenate([g.receivers + o for g, o in zip(graphs, offsets)]),
    )


def _incidence(rows: np.ndarray, n: int, values=None, dtype=np.float64) -> sp.csr_matrix:
    e = len(rows)
    vals = np.ones(e, dtype=dtype) if values is None else values.astype(dtype)
    return sp.csr_matrix((vals, (rows, np.arange(e))), shape=(n, e))


# -- elementary ops ---------------------------------------------------------------------

def softplus(z):
    z = np.asarray(z)
    return _kernels.softplus_1d(z.ravel()).reshape(z.shape)


def _sigmoid(z):
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def _leaky(a, slope):
    return np.maximum(a, slope * a)


def _leaky_back(grad, a, slope):
    return _kernels.leaky_back(grad, a, grad.dtype.type(slope))


def _ln_forward(r, g, b):
    y, xhat, inv = _kernels.ln_forward(np.ascontiguousarray(r), g, b, r.dtype.type(LN_EPS))
    return y, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    return _kernels.ln_backward(np.ascontiguousarray(dy), g, xhat, inv)


# -- forward / backward -------------------------------------------------------------------

class ForwardCache:
    def __init__(self, params_token, n_nodes):
        self.params_token = params_token
        self.n_nodes = n_nodes
        self.steps = []


def _token(params: MpnParams):
    return (id(params), params.version)


def forward(params: MpnParams, graph: MeshGraph, train: bool = False,
            rng: np.random.Generator | None = None, edge_mask: np.ndarray | None = None,
            dtype=np.float64, keep: bool = True) -> tuple[np.ndarray, ForwardCache]:
    """Per-node positive predictions and the activations needed by :func:`backward`.

    In training mode each directed edge is dropped from the aggregation with
    probability ``cfg.edge_dropout`` (or according to ``edge_mask``).  With
    ``keep=False`` per-step activations are released as soon as they are used,
    so the returned cache cannot be passed to :func:`backward`.
    """
    cfg = params.cfg
    if graph.node_features.shape[1] != cfg.node_width:
        raise ValueError("node feature width does not match the network")
    if graph.edge_features.shape[1] != cfg.edge_width:
        raise ValueError("edge feature width does not match the network")
    P = {k: v.astype(dtype, copy=False) for k, v in params.arrays.items()}
    slope = cfg.leaky_slope
    d = cfg.latent
    n = graph.n_nodes
    recv = graph.receivers
    send = graph.senders
    if edge_mask is None:
        if train and cfg.edge_dropout > 0:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            edge_mask = rng.random(len(recv)) >= cfg.edge_dropout
        else:
            edge_mask = np.ones(len(recv), dtype=bool)
    edge_mask = np.asarray(edge_mask, dtype=bool)
    kept = np.bincount(recv, weights=edge_mask.astype(float), minlength=n)
    agg_w = np.where(edge_mask, 1.0 / np.maximum(kept[recv], 1.0), 0.0)
    c = ForwardCache(_token(params), n)
    c.dtype = dtype
    c.edge_mask = edge_mask
    c.recv_mat = _incidence(recv, n, dtype=dtype)
    c.send_mat = _incidence(send, n, dtype=dtype)
    c.agg_mat = _incidence(recv, n, agg_w, dtype=dtype)
    c.agg_mat_t = c.agg_mat.T.tocsr()
    c.recv = recv
    c.send = send

    x_node = graph.node_features.astype(dtype)
    x_edge = graph.edge_features.astype(dtype)
    c.x_node, c.x_edge = x_node, x_edge
    v = x_node @ P["embed_node.w"] + P["embed_node.b"]
    e = x_edge @ P["embed_edge.w"] + P["embed_edge.b"]
    pre = cfg.norm_placement == "pre"
    for l in range(cfg.steps):
        p = f"step{l}."
        s = {"v_in": v, "e_in": e}
        if pre:
            vn, s["ln_v"] = _ln_forward(v, P[p + "node_norm.g"], P[p + "node_norm.b"])
            en, s["ln_e"] = _ln_forward(e, P[p + "edge_norm.g"], P[p + "edge_norm.b"])
        else:
            vn, en = v, e
        s["vn"], s["en"] = vn, en
        w1 = P[p + "edge.w1"]
        proj_r = vn @ w1[:d]
        proj_s = vn @ w1[d:2 * d]
        a1 = proj_r[recv] + proj_s[send] + en @ w1[2 * d:] + P[p + "edge.b1"]
        z1 = _leaky(a1, slope)
        m_e = z1 @ P[p + "edge.w2"] + P[p + "edge.b2"]
        s["a1_e"], s["z1_e"] = a1, z1
        if pre:
            e = e + m_e
        else:
            e, s["ln_e"] = _ln_forward(e + m_e, P[p + "edge_norm.g"], P[p + "edge_norm.b"])
        s["e_out"] = e
        agg = c.agg_mat @ e
        s["agg"] = agg
        w1n = P[p + "node.w1"]
        a1n = vn @ w1n[:d] + agg @ w1n[d:] + P[p + "node.b1"]
        z1n = _leaky(a1n, slope)
        m_v = z1n @ P[p + "node.w2"] + P[p + "node.b2"]
        s["a1_v"], s["z1_v"] = a1n, z1n
        if pre:
            v = v + m_v
        else:
            v, s["ln_v"] = _ln_forward(v + m_v, P[p + "node_norm.g"], P[p + "node_norm.b"])
        if keep:
            c.steps.append(s)
    c.v_final = v
    a_dec = v @ P["decoder.w1"] + P["decoder.b1"]
    z_dec = _leaky(a_dec, slope)
    out = _kernels.row_dot(z_dec, P["decoder.w2"][:, 0].copy()) + P["decoder.b2"][0]
    c.a_dec, c.z_dec, c.out = a_dec, z_dec, out
    pred = softplus(out)
    c.pred = pred
    return pred.astype(np.float64), c


def loss_mse(pred, labels) -> float:
    pred = np.asarray(pred, dtype=float)
    labels = np.asarray(getattr(labels, "values", labels), dtype=float)
    if pred.shape != labels.shape:
        raise ValueError("prediction and label lengths differ")
    return float(np.mean((pred - labels) ** 2))


def loss_log_mse(pred, labels) -> float:
    pred = np.asarray(pred, dtype=float)
    labels = np.asarray(getattr(labels, "values", labels), dtype=float)
    if pred.shape != labels.shape:
        raise ValueError("prediction and label lengths differ")
    if np.any(pred <= 0) or np.any(labels <= 0):
        raise ValueError("log-space loss needs strictly positive values")
    return float(np.mean((np.log(pred) - np.log(labels)) ** 2))


LOSSES = {"mse": loss_mse, "log_mse": loss_log_mse}


def _loss_grad(kind: str, pred, labels):
    n = len(pred)
    if kind == "mse":
        return 2.0 * (pred - labels) / n
    if kind == "log_mse":
        return 2.0 * (np.log(pred) - np.log(labels)) / (n * pred)
    raise ValueError(f"unknown loss {kind!r}")


def backward(params: MpnParams, cache: ForwardCache, labels, loss: str = "mse"
             ) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and exact gradients for every parameter (float64 arrays)."""
    if cache.params_token != _token(params):
        raise ValueError("forward cache is stale: parameters changed since the forward pass")
    if len(cache.steps) != params.cfg.steps:
        raise ValueError("forward cache holds no activations (forward ran with keep=False)")
    labels = np.asarray(getattr(labels, "values", labels), dtype=float)
    if labels.shape != (cache.n_nodes,):
        raise ValueError("label count differs from node count")
    cfg = params.cfg
    dtype = cache.dtype
    P = {k: v.astype(dtype, copy=False) for k, v in params.arrays.items()}
    slope = cfg.leaky_slope
    d = cfg.latent
    pre = cfg.norm_placement == "pre"
    pred64 = cache.pred.astype(np.float64)
    value = LOSSES[loss](pred64, labels)
    grads = {}

    d_out = (_loss_grad(loss, pred64, labels) * _sigmoid(cache.out.astype(np.float64))).astype(dtype)
    grads["decoder.w2"] = cache.z_dec.T @ d_out[:, None]
    grads["decoder.b2"] = np.array([d_out.sum()])
    d_z = d_out[:, None] * P["decoder.w2"][:, 0]
    d_a = _leaky_back(d_z, cache.a_dec, slope)
    grads["decoder.w1"] = cache.v_final.T @ d_a
    grads["decoder.b1"] = d_a.sum(axis=0)
    dv = d_a @ P["decoder.w1"].T
    de = np.zeros_like(cache.steps[-1]["e_out"]) if cache.steps else None

    for l in reversed(range(cfg.steps)):
        p = f"step{l}."
        s = cache.steps[l]
        # node update
        if pre:
            d_mv = dv
            dv_skip = dv
        else:
            d_r, grads[p + "node_norm.g"], grads[p + "node_norm.b"] = _ln_backward(
                dv, P[p + "node_norm.g"], s["ln_v"])
            d_mv = d_r
            dv_skip = d_r
        grads[p + "node.w2"] = s["z1_v"].T @ d_mv
        grads[p + "node.b2"] = d_mv.sum(axis=0)
        d_a1n = _leaky_back(d_mv @ P[p + "node.w2"].T, s["a1_v"], slope)
        w1n = P[p + "node.w1"]
        grads[p + "node.w1"] = np.concatenate([s["vn"].T @ d_a1n, s["agg"].T @ d_a1n])
        grads[p + "node.b1"] = d_a1n.sum(axis=0)
        d_vn = d_a1n @ w1n[:d].T
        d_agg = d_a1n @ w1n[d:].T
        de = de + cache.agg_mat_t @ d_agg
        # edge update
        if pre:
            d_me = de
            de_skip = de
        else:
            d_r, grads[p + "edge_norm.g"], grads[p + "edge_norm.b"] = _ln_backward(
                de, P[p + "edge_norm.g"], s["ln_e"])
            d_me = d_r
            de_skip = d_r
        grads[p + "edge.w2"] = s["z1_e"].T @ d_me
        grads[p + "edge.b2"] = d_me.sum(axis=0)
        d_a1 = _leaky_back(d_me @ P[p + "edge.w2"].T, s["a1_e"], slope)
        w1 = P[p + "edge.w1"]
        g_r = cache.recv_mat @ d_a1
        g_s = cache.send_mat @ d_a1
        grads[p + "edge.w1"] = np.concatenate([
            s["vn"].T @ g_r, s["vn"].T @ g_s, s["en"].T @ d_a1])
        grads[p + "edge.b1"] = d_a1.sum(axis=0)
        d_vn = d_vn + g_r @ w1[:d].T + g_s @ w1[d:2 * d].T
        d_en = d_a1 @ w1[2 * d:].T
        if pre:
            d_v_ln, grads[p + "node_norm.g"], grads[p + "node_norm.b"] = _ln_backward(
                d_vn, P[p + "node_norm.g"], s["ln_v"])
            d_e_ln, grads[p + "edge_norm.g"], grads[p + "edge_norm.b"] = _ln_backward(
                d_en, P[p + "edge_norm.g"], s["ln_e"])
            dv = dv_skip + d_v_ln
            de = de_skip + d_e_ln
        else:
            dv = dv_skip + d_vn
            de = de_skip + d_en
    grads["embed_node.w"] = cache.x_node.T @ dv
    grads["embed_node.b"] = dv.sum(axis=0)
    if de is None:
        de = np.zeros((len(cache.x_edge), d), dtype=dtype)
    grads["embed_edge.w"] = cache.x_edge.T @ de
    grads["embed_edge.b"] = de.sum(axis=0)
    ordered = {}
    for name, shape in param_shapes(cfg):
        ordered[name] = np.asarray(grads[name], dtype=np.float64).reshape(shape)
    return value, ordered


# -- optimizer --------------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MpnParams, lr: float = 3e-4) -> AdamState:
        return cls(params.zeros_like(), params.zeros_like(), 0, lr)


def adam_step(params: MpnParams, state: AdamState, grads: dict[str, np.ndarray]) -> None:
    """In-place bias-corrected Adam update."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, w in params.arrays.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        w -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    params.version += 1


# -- checkpoints --------------------------------------------------------------------------------

def save_checkpoint(path, params: MpnParams, adam: AdamState, stats: FeatureStats,
                    extra: dict | None = None) -> None:
    """Binary checkpoint: magic, length-prefixed JSON header, raw little-endian float64 arrays."""
    cfg = params.cfg
    header = {
        "config": asdict(cfg),
        "digest": cfg.digest(),
        "shapes": [[name, list(shape)] for name, shape in param_shapes(cfg)],
        "stats": stats.to_json(),
        "adam": {"step": adam.step, "lr": adam.lr, "beta1": adam.beta1,
                 "beta2": adam.beta2, "eps": adam.eps},
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<Q", len(blob)), blob]
    for group in (params.arrays, adam.m, adam.v):
        for name, _ in param_shapes(cfg):
            parts.append(np.ascontiguousarray(group[name], dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


@dataclass
class Checkpoint:
    params: MpnParams
    adam: AdamState
    stats: FeatureStats
    extra: dict


def load_checkpoint(path, expect: MpnConfig | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise CheckpointError("not an AMBR1 checkpoint")
    if len(data) < 13:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", data[5:13])
    if len(data) < 13 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[13:13 + hlen])
        cfg = MpnConfig(**header["config"])
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if cfg.digest() != header["digest"]:
        raise CheckpointError("config digest mismatch")
    if expect is not None and expect.digest() != cfg.digest():
        raise CheckpointError("checkpoint was written for a different network configuration")
    shapes = param_shapes(cfg)
    if [[n, list(s)] for n, s in shapes] != header["shapes"]:
        raise CheckpointError("parameter layout mismatch")
    total = sum(int(np.prod(s)) for _, s in shapes)
    body = data[13 + hlen:]
    if len(body) != 3 * total * 8:
        raise CheckpointError("truncated or oversized checkpoint body")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    groups = []
    pos = 0
    for _ in range(3):
        g = {}
        for name, shape in shapes:
            size = int(np.prod(shape))
            g[name] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        groups.append(g)
    params = MpnParams(cfg, groups[0])
    a = header["adam"]
    adam = AdamState(groups[1], groups[2], a["step"], a["lr"], a["beta1"], a["beta2"], a["eps"])
    return Checkpoint(params, adam, FeatureStats.from_json(header["stats"]), header["extra"])
