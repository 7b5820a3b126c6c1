import numpy as np
import pytest

from amber.fem import solve_poisson
from amber.geometry import lshape, make_rng, sample_gmm_load
from amber.graph import FeatureStats, MeshGraph, build_graph, normalize, update_stats
from amber.mesh import TriMesh
from amber.mesher import uniform_initial_mesh
from amber.mpn import (LOSSES, AdamState, CheckpointError, MpnConfig, adam_step, backward,
                       batch_graphs, forward, init_params, load_checkpoint, loss_log_mse,
                       loss_mse, save_checkpoint, softplus)


def small_graph(seed=1, h=0.3):
    rng = make_rng(seed)
    dom = lshape((0.5, 0.5))
    load = sample_gmm_load(rng, dom)
    mesh = uniform_initial_mesh(dom, h)
    g = build_graph(mesh, load, solve_poisson(mesh, load))
    stats = update_stats(FeatureStats.empty(4), g)
    return normalize(g, stats), stats, mesh


def random_graph(rng, n_nodes=10, n_edges=30, width=4):
    s = rng.integers(0, n_nodes, n_edges)
    r = rng.integers(0, n_nodes, n_edges)
    return MeshGraph(rng.normal(size=(n_nodes, width)), rng.normal(size=(n_edges, 1)), s, r)


def test_init_examples():
    cfg = MpnConfig(node_width=4, latent=16, steps=2)
    a = init_params(make_rng(5), cfg)
    b = init_params(make_rng(5), cfg)
    for k in a.arrays:
        np.testing.assert_array_equal(a[k], b[k])
    for k, v in a.arrays.items():
        if v.ndim == 1:
            np.testing.assert_array_equal(v, 1.0 if k.endswith(".g") else 0.0)


def test_glorot_spread():
    cfg = MpnConfig(node_width=4, latent=64, steps=3)
    p = init_params(make_rng(0), cfg)
    w = p["step0.edge.w1"]
    assert w.size >= 10_000
    target = np.sqrt(2.0 / sum(w.shape))
    assert abs(w.std() / target - 1.0) < 0.2


def test_forward_positive_and_shape():
    g, _, _ = small_graph()
    p = init_params(make_rng(0), MpnConfig(node_width=4, latent=16, steps=3))
    pred, _ = forward(p, g)
    assert pred.shape == (g.n_nodes,)
    assert np.all(pred > 0)
    with pytest.raises(ValueError):
        forward(init_params(make_rng(0), MpnConfig(node_width=3)), g)
    with pytest.raises(ValueError):
        forward(p, g, train=True)


def test_decoder_bias_closed_form():
    g, _, _ = small_graph()
    cfg = MpnConfig(node_width=4, latent=8, steps=2)
    p = init_params(make_rng(0), cfg)
    p.arrays["decoder.w2"][:] = 0.0
    p.arrays["decoder.b2"][:] = 0.7
    pred, _ = forward(p, g)
    np.testing.assert_allclose(pred, np.log1p(np.exp(0.7)), rtol=1e-15)


def test_softplus_branches():
    z = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    out = softplus(z)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[1:4], np.log1p(np.exp(z[1:4])), rtol=1e-14)
    assert out[-1] == 800.0 and out[0] >= 0.0


@pytest.mark.parametrize("placement", ["post", "pre"])
def test_permutation_equivariance(placement, rng):
    g, _, _ = small_graph()
    p = init_params(make_rng(3), MpnConfig(node_width=4, latent=16, steps=3,
                                           norm_placement=placement))
    pred, _ = forward(p, g)
    for _ in range(5):
        perm = rng.permutation(g.n_nodes)
        out, _ = forward(p, g.permuted(perm))
        np.testing.assert_array_equal(out[perm], pred)


def test_eval_forward_deterministic():
    g, _, _ = small_graph()
    p = init_params(make_rng(3), MpnConfig(node_width=4, latent=16, steps=3))
    np.testing.assert_array_equal(forward(p, g)[0], forward(p, g)[0])


def test_isolated_node_after_dropout():
    g, _, _ = small_graph()
    p = init_params(make_rng(3), MpnConfig(node_width=4, latent=8, steps=2))
    mask = np.zeros(g.n_edges, dtype=bool)
    pred, _ = forward(p, g, train=True, edge_mask=mask)
    iso = MeshGraph(g.node_features, g.edge_features[:0], g.senders[:0], g.receivers[:0])
    np.testing.assert_allclose(pred, forward(p, iso)[0], rtol=1e-13)


def test_loss_examples():
    x = np.array([0.3, 1.2, 2.0])
    assert loss_mse(x, x) == 0.0
    assert loss_mse([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert loss_mse(3 * x, 3 * (x + 0.1)) == pytest.approx(9 * loss_mse(x, x + 0.1), rel=1e-12)
    assert loss_log_mse(x, x) == 0.0
    assert loss_log_mse(np.e * x, x) == pytest.approx(1.0, rel=1e-14)
    y = np.array([0.5, 0.9, 1.7])
    assert loss_log_mse(5 * x, 5 * y) == pytest.approx(loss_log_mse(x, y), rel=1e-12)
    with pytest.raises(ValueError):
        loss_log_mse([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        loss_mse([1.0], [1.0, 2.0])


def finite_difference_check(params, graph, labels, mask, loss, per_group=6, seed=0, h=1e-6):
    """Worst group-level relative error between analytic and central-difference gradients."""
    rng = make_rng(seed)
    pred, cache = forward(params, graph, train=True, edge_mask=mask)
    _, grads = backward(params, cache, labels, loss)
    worst = {}
    for name, w in params.arrays.items():
        flat = w.reshape(-1)
        idx = rng.choice(flat.size, size=min(per_group, flat.size), replace=False)
        fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            lp = LOSSES[loss](forward(params, graph, edge_mask=mask)[0], labels)
            flat[i] = old - h
            lm = LOSSES[loss](forward(params, graph, edge_mask=mask)[0], labels)
            flat[i] = old
            fd[j] = (lp - lm) / (2 * h)
        an = grads[name].reshape(-1)[idx]
        scale = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12)
        worst[name] = float(np.linalg.norm(fd - an) / scale)
    return worst


@pytest.mark.parametrize("placement", ["post", "pre"])
@pytest.mark.parametrize("loss", ["mse", "log_mse"])
def test_gradient_check(placement, loss):
    rng = make_rng(8)
    g = random_graph(rng)
    p = init_params(make_rng(0), MpnConfig(node_width=4, latent=8, steps=3,
                                           norm_placement=placement))
    labels = rng.uniform(0.1, 1.5, size=g.n_nodes)
    mask = rng.random(g.n_edges) >= 0.1
    worst = finite_difference_check(p, g, labels, mask, loss)
    bad = {k: v for k, v in worst.items() if v >= 1e-5}
    assert not bad, bad


def test_gradients_follow_relabeling(rng):
    g = random_graph(rng)
    p = init_params(make_rng(0), MpnConfig(node_width=4, latent=8, steps=2))
    labels = rng.uniform(0.1, 1.5, size=g.n_nodes)
    _, c = forward(p, g)
    _, ga = backward(p, c, labels)
    perm = rng.permutation(g.n_nodes)
    h = g.permuted(perm)
    lab = np.empty_like(labels)
    lab[perm] = labels
    _, c2 = forward(p, h)
    _, gb = backward(p, c2, lab)
    for k in ga:
        np.testing.assert_allclose(gb[k], ga[k], rtol=1e-9, atol=1e-13)


def test_zero_gradient_at_exact_fit():
    g, _, _ = small_graph()
    p = init_params(make_rng(0), MpnConfig(node_width=4, latent=8, steps=2))
    p.arrays["decoder.w2"][:] = 0.0
    p.arrays["decoder.b2"][:] = 0.2
    labels = np.full(g.n_nodes, softplus(np.array(0.2)))
    _, c = forward(p, g)
    value, grads = backward(p, c, labels)
    assert value == 0.0
    for v in grads.values():
        assert np.all(v == 0.0)


def test_stale_cache_rejected():
    g, _, _ = small_graph()
    p = init_params(make_rng(0), MpnConfig(node_width=4, latent=8, steps=2))
    pred, c = forward(p, g)
    _, grads = backward(p, c, pred + 0.1)
    adam_step(p, AdamState.for_params(p), grads)
    with pytest.raises(ValueError):
        backward(p, c, pred)
    with pytest.raises(ValueError):
        backward(p, forward(p, g)[1], pred[:-1])


def test_adam_examples():
    g, _, _ = small_graph()
    p = init_params(make_rng(0), MpnConfig(node_width=4, latent=8, steps=2))
    before = p.copy()
    state = AdamState.for_params(p)
    adam_step(p, state, p.zeros_like())
    for k in p.arrays:
        np.testing.assert_array_equal(p[k], before[k])
    # first step with a nonzero gradient moves every entry by lr against its sign
    p = before.copy()
    state = AdamState.for_params(p, lr=1e-3)
    # |g| well above eps so that m_hat / (sqrt(v_hat) + eps) is sign(g) to 1e-7
    r = make_rng(1)
    grads = {k: r.choice([-1.0, 1.0], v.shape) * r.uniform(0.1, 2.0, v.shape)
             for k, v in p.arrays.items()}
    adam_step(p, state, grads)
    for k in p.arrays:
        np.testing.assert_allclose(p[k] - before[k], -1e-3 * np.sign(grads[k]), rtol=1e-6)


def test_adam_regression_decreases():
    g, _, _ = small_graph()
    p = init_params(make_rng(0), MpnConfig(node_width=4, latent=16, steps=2))
    labels = 0.05 + 0.02 * np.abs(g.node_features[:, 0])
    state = AdamState.for_params(p, lr=1e-3)
    losses = []
    for _ in range(100):
        _, c = forward(p, g)
        value, grads = backward(p, c, labels)
        losses.append(value)
        adam_step(p, state, grads)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_batch_graphs_matches_separate():
    g, _, _ = small_graph(1)
    h, _, _ = small_graph(2, h=0.25)
    p = init_params(make_rng(0), MpnConfig(node_width=4, latent=8, steps=2))
    both, _ = forward(p, batch_graphs([g, h]))
    np.testing.assert_allclose(both[:g.n_nodes], forward(p, g)[0], rtol=1e-12)
    np.testing.assert_allclose(both[g.n_nodes:], forward(p, h)[0], rtol=1e-12)


def test_float32_forward_close():
    g, _, _ = small_graph()
    p = init_params(make_rng(0), MpnConfig(node_width=4, latent=16, steps=3))
    a, _ = forward(p, g)
    b, _ = forward(p, g, dtype=np.float32)
    np.testing.assert_allclose(b, a, rtol=1e-4)


def test_checkpoint_roundtrip(tmp_path):
    g, stats, _ = small_graph()
    cfg = MpnConfig(node_width=4, latent=8, steps=2)
    p = init_params(make_rng(0), cfg)
    state = AdamState.for_params(p)
    pred, c = forward(p, g)
    _, grads = backward(p, c, pred * 1.1)
    adam_step(p, state, grads)
    path = tmp_path / "m.ambr"
    save_checkpoint(path, p, state, stats, {"s_min": 0.01})
    ck = load_checkpoint(path, expect=cfg)
    np.testing.assert_array_equal(forward(ck.params, g)[0], forward(p, g)[0])
    assert ck.adam.step == 1 and ck.extra == {"s_min": 0.01}
    np.testing.assert_array_equal(ck.adam.v["decoder.w2"], state.v["decoder.w2"])
    np.testing.assert_array_equal(ck.stats.node.mean, stats.node.mean)
    data = path.read_bytes()
    assert data[:5] == b"AMBR1"
    (tmp_path / "cut.ambr").write_bytes(data[:-9])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.ambr")
    (tmp_path / "head.ambr").write_bytes(data[:20])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "head.ambr")
    (tmp_path / "junk.ambr").write_bytes(b"NOPE" + data)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ambr")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect=MpnConfig(node_width=1, latent=8, steps=2))


def test_rigid_motion_outputs_identical():
    import math
    rng = make_rng(3)
    dom = lshape((0.6, 0.5))
    load = sample_gmm_load(rng, dom)
    mesh = uniform_initial_mesh(dom, 0.2)
    u = solve_poisson(mesh, load)
    rot = np.array([[math.cos(1.1), -math.sin(1.1)], [math.sin(1.1), math.cos(1.1)]])
    moved = TriMesh(mesh.vertices @ rot.T + [2.0, 1.0], mesh.triangles)
    g = build_graph(mesh, load, u)
    h = build_graph(moved, load.transformed(rot, np.array([2.0, 1.0])), u)
    stats = update_stats(FeatureStats.empty(4), g)
    p = init_params(make_rng(0), MpnConfig(node_width=4, latent=8, steps=2))
    np.testing.assert_allclose(forward(p, normalize(h, stats))[0],
                               forward(p, normalize(g, stats))[0], rtol=1e-8)


def test_lean_forward_matches_and_refuses_backward():
    g, _, _ = small_graph()
    p = init_params(make_rng(0), MpnConfig(node_width=4, latent=8, steps=3))
    full, _ = forward(p, g)
    lean, cache = forward(p, g, keep=False)
    np.testing.assert_array_equal(lean, full)
    with pytest.raises(ValueError):
        backward(p, cache, np.ones(g.n_nodes))
